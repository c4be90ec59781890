//! C ABI over the lanefuse losses, lane matching and checkpoint inference.
//!
//! Every fallible function returns an [`LfStatus`]; on failure a message is
//! kept per thread and can be read with [`lf_last_error`]. Lane sets and
//! models are opaque handles owned by the caller and released with the
//! matching `*_free` function. Panics never cross the boundary; they are
//! reported as [`LfStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lanefuse::checkpoint::Checkpoint;
use lanefuse::config::RunConfiguration;
use lanefuse::error::Error;
use lanefuse::geometry::{AnchorSet, Lane3D};
use lanefuse::losses::{self, BalancedL1, DiceConfig, FocalConfig, PointSet};
use lanefuse::metrics::{match_lanes, EvalConfig};
use lanefuse::model::{detect, Model};
use ndarray::ArrayView2;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Io = 4,
    Checkpoint = 5,
    Panic = 6,
}

/// Counts and scores of one matching call.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LfMatchSummary {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub correct_category: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Ordered collection of 3D lanes.
pub struct LfLaneSet {
    lanes: Vec<Lane3D>,
}

/// A trained model with the anchors and detection rules it runs with.
pub struct LfModel {
    model: Model,
    anchors: AnchorSet,
    eval: EvalConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(LfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Domain { .. } | Error::Diverged { .. } => LfStatus::Domain,
            Error::Io { .. } | Error::Json { .. } | Error::Csv(_) => LfStatus::Io,
            Error::Checkpoint(_) => LfStatus::Checkpoint,
            _ => LfStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LfStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(LfStatus::NullPointer, format!("{what} is null"))
}

/// View `len` doubles at `p`; a null pointer is only accepted for `len == 0`.
unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure(LfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn points(p: *const f64, n: usize, what: &str) -> Result<PointSet, Failure> {
    let flat = slice(p, 3 * n, what)?;
    Ok(PointSet::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())?)
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn lf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Balanced L1 of a non-negative residual and its derivative.
///
/// # Safety
/// `value` and `derivative` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lf_balanced_l1(
    delta: f64,
    alpha: f64,
    gamma: f64,
    beta: f64,
    value: *mut f64,
    derivative: *mut f64,
) -> LfStatus {
    guard(|| {
        let (v, d) = losses::balanced_l1(delta, &BalancedL1::new(alpha, gamma, beta)?)?;
        *out(value, "value")? = v;
        *out(derivative, "derivative")? = d;
        Ok(())
    })
}

/// Softmax focal loss of `n` logits; `grad` receives `n` entries.
///
/// # Safety
/// `logits` and `grad` must point to `n` doubles; `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lf_focal(
    logits: *const f64,
    n: usize,
    target: usize,
    gamma: f64,
    alpha: f64,
    value: *mut f64,
    grad: *mut f64,
) -> LfStatus {
    guard(|| {
        let z = slice(logits, n, "logits")?;
        let (v, g) = losses::focal(z, target, &FocalConfig { gamma, alpha })?;
        *out(value, "value")? = v;
        slice_mut(grad, n, "grad")?.copy_from_slice(&g);
        Ok(())
    })
}

/// Soft Dice loss; `grad` receives the derivative with respect to
/// `probabilities`.
///
/// # Safety
/// `probabilities`, `target` and `grad` must point to `n` doubles; `value`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn lf_dice(
    probabilities: *const f64,
    target: *const f64,
    n: usize,
    epsilon: f64,
    value: *mut f64,
    grad: *mut f64,
) -> LfStatus {
    guard(|| {
        let p = slice(probabilities, n, "probabilities")?;
        let t = slice(target, n, "target")?;
        let (v, g) = losses::dice(p, t, &DiceConfig { epsilon })?;
        *out(value, "value")? = v;
        slice_mut(grad, n, "grad")?.copy_from_slice(&g);
        Ok(())
    })
}

/// Chamfer distance between point sets of `np` and `nq` points stored as
/// `x, y, z` triples. Either gradient buffer may be null to skip it.
///
/// # Safety
/// `p` / `grad_p` must hold `3 * np` doubles and `q` / `grad_q` `3 * nq`.
#[no_mangle]
pub unsafe extern "C" fn lf_chamfer(
    p: *const f64,
    np: usize,
    q: *const f64,
    nq: usize,
    value: *mut f64,
    grad_p: *mut f64,
    grad_q: *mut f64,
) -> LfStatus {
    guard(|| {
        let r = losses::chamfer(&points(p, np, "p")?, &points(q, nq, "q")?);
        *out(value, "value")? = r.value;
        for (buf, g) in [(grad_p, &r.grad_p), (grad_q, &r.grad_q)] {
            if !buf.is_null() {
                slice_mut(buf, 3 * g.len(), "grad")?.copy_from_slice(g.as_flattened());
            }
        }
        Ok(())
    })
}

/// New empty lane set.
#[no_mangle]
pub extern "C" fn lf_lane_set_new() -> *mut LfLaneSet {
    Box::into_raw(Box::new(LfLaneSet { lanes: Vec::new() }))
}

/// Release a lane set; null is ignored.
///
/// # Safety
/// `set` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lf_lane_set_free(set: *mut LfLaneSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Number of lanes in the set (0 for null).
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lf_lane_set_len(set: *const LfLaneSet) -> usize {
    set.as_ref().map_or(0, |s| s.lanes.len())
}

/// Append a lane of `n` points. Stations must be strictly increasing and
/// visibility must lie in [0, 1].
///
/// # Safety
/// The four arrays must hold `n` doubles each.
#[no_mangle]
pub unsafe extern "C" fn lf_lane_set_push(
    set: *mut LfLaneSet,
    stations: *const f64,
    x: *const f64,
    z: *const f64,
    visibility: *const f64,
    n: usize,
    category: usize,
) -> LfStatus {
    guard(|| {
        let set = out(set, "set")?;
        let lane = Lane3D::new(
            slice(stations, n, "stations")?.to_vec(),
            slice(x, n, "x")?.to_vec(),
            slice(z, n, "z")?.to_vec(),
            slice(visibility, n, "visibility")?.to_vec(),
            category,
        )?;
        set.lanes.push(lane);
        Ok(())
    })
}

/// Copy lane `index` out. `*n` receives the point count; the arrays are
/// filled only when `capacity` is large enough (pass 0 to query the size).
///
/// # Safety
/// Non-null arrays must hold `capacity` doubles; `n` and `category` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn lf_lane_set_get(
    set: *const LfLaneSet,
    index: usize,
    capacity: usize,
    stations: *mut f64,
    x: *mut f64,
    z: *mut f64,
    visibility: *mut f64,
    n: *mut usize,
    category: *mut usize,
) -> LfStatus {
    guard(|| {
        let set = set.as_ref().ok_or_else(|| null("set"))?;
        let lane = set.lanes.get(index).ok_or_else(|| {
            Failure(
                LfStatus::InvalidArgument,
                format!("lane index {index} out of range (len {})", set.lanes.len()),
            )
        })?;
        let len = lane.len();
        *out(n, "n")? = len;
        *out(category, "category")? = lane.category();
        if capacity >= len {
            for (buf, src) in [
                (stations, lane.stations()),
                (x, lane.lateral()),
                (z, lane.height()),
                (visibility, lane.visibility()),
            ] {
                if !buf.is_null() {
                    slice_mut(buf, len, "lane buffer")?.copy_from_slice(src);
                }
            }
        }
        Ok(())
    })
}

/// Match predicted lanes to ground truth.
///
/// # Safety
/// Both sets must be live handles and `summary` writable.
#[no_mangle]
pub unsafe extern "C" fn lf_match_lanes(
    predictions: *const LfLaneSet,
    ground_truth: *const LfLaneSet,
    threshold: f64,
    coverage: f64,
    summary: *mut LfMatchSummary,
) -> LfStatus {
    guard(|| {
        let p = predictions.as_ref().ok_or_else(|| null("predictions"))?;
        let g = ground_truth.as_ref().ok_or_else(|| null("ground_truth"))?;
        let r = match_lanes(&p.lanes, &g.lanes, threshold, coverage)?;
        *out(summary, "summary")? = LfMatchSummary {
            true_positives: r.true_positives,
            false_positives: r.false_positives,
            false_negatives: r.false_negatives,
            correct_category: r.correct_category,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            accuracy: r.accuracy,
        };
        Ok(())
    })
}

/// Load a checkpoint. `config_path` names the run configuration that
/// defines the anchors and detection rules; null means the defaults.
///
/// # Safety
/// Paths must be null-terminated; `model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lf_model_load(
    checkpoint_path: *const c_char,
    config_path: *const c_char,
    model: *mut *mut LfModel,
) -> LfStatus {
    guard(|| {
        let slot = out(model, "model")?;
        *slot = ptr::null_mut();
        let config = if config_path.is_null() {
            RunConfiguration::default()
        } else {
            RunConfiguration::load(path(config_path, "config_path")?)?
        };
        let anchors = config.validate()?;
        let ck = Checkpoint::load(path(checkpoint_path, "checkpoint_path")?)?;
        if ck.model.layout().stations != anchors.station_count() {
            return Err(Failure(
                LfStatus::Checkpoint,
                format!(
                    "checkpoint has {} stations, configuration {}",
                    ck.model.layout().stations,
                    anchors.station_count()
                ),
            ));
        }
        *slot = Box::into_raw(Box::new(LfModel {
            model: ck.model,
            anchors,
            eval: config.eval,
        }));
        Ok(())
    })
}

/// Release a model; null is ignored.
///
/// # Safety
/// `model` must come from [`lf_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lf_model_free(model: *mut LfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Anchor count the model expects per frame (0 for null).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lf_model_anchors(model: *const LfModel) -> usize {
    model.as_ref().map_or(0, |m| m.anchors.count())
}

/// Feature channels per anchor (0 for null).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lf_model_channels(model: *const LfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.channels())
}

/// Detect lanes in the last of `frames` feature maps, oldest first, each
/// `anchors x channels` row-major. On success `*lanes` is a new set owned
/// by the caller.
///
/// # Safety
/// `features` must hold `frames * anchors * channels` doubles and `lanes`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn lf_model_predict(
    model: *const LfModel,
    features: *const f64,
    frames: usize,
    anchors: usize,
    channels: usize,
    lanes: *mut *mut LfLaneSet,
) -> LfStatus {
    guard(|| {
        let slot = out(lanes, "lanes")?;
        *slot = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if frames == 0 {
            return Err(Failure(LfStatus::InvalidArgument, "at least one frame is required".into()));
        }
        if anchors != m.anchors.count() || channels != m.model.channels() {
            return Err(Failure(
                LfStatus::InvalidArgument,
                format!(
                    "features are {anchors} x {channels}, model expects {} x {}",
                    m.anchors.count(),
                    m.model.channels()
                ),
            ));
        }
        let flat = slice(features, frames * anchors * channels, "features")?;
        let window = flat
            .chunks_exact(anchors * channels)
            .map(|f| ArrayView2::from_shape((anchors, channels), f))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure(LfStatus::InvalidArgument, e.to_string()))?;
        let output = m.model.predict(&m.anchors, &window)?;
        let found = detect(&m.anchors, &output, &m.eval)?;
        *slot = Box::into_raw(Box::new(LfLaneSet { lanes: found }));
        Ok(())
    })
}
