//! Seeded finite-difference suite over every loss, the LSTM and the heads.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{central_difference_report, GradCheckReport};
use crate::error::Result;
use crate::fusion::{fuse_backward, fuse_frames, LstmParameters};
use crate::geometry::{build_default_anchors, AnchorLayout};
use crate::heads::{backward, forward, HeadLayout, HeadParameters};
use crate::losses::{
    balanced_l1, chamfer, combine_uncertainty, dice, focal, BalancedL1, DiceConfig, FocalConfig, PointSet,
    Task, UncertaintyState,
};

pub const DEFAULT_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_SAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub samples: usize,
    pub step: f64,
    pub threshold: f64,
    /// Test hook: perturb the analytic gradient of this operation.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: DEFAULT_SAMPLES,
            step: DEFAULT_STEP,
            threshold: DEFAULT_THRESHOLD,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperationCheck {
    pub operation: String,
    pub samples: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSuite {
    pub seed: u64,
    pub step: f64,
    pub threshold: f64,
    pub operations: Vec<OperationCheck>,
    pub worst_operation: String,
    pub worst_relative_error: f64,
    pub passed: bool,
}

pub const OPERATIONS: [&str; 9] = [
    "balanced_l1",
    "chamfer",
    "focal",
    "dice",
    "uncertainty",
    "lstm_t1",
    "lstm_t2",
    "lstm_t3",
    "heads",
];

fn corrupt(analytic: &mut [f64], on: bool) {
    if on {
        if let Some(g) = analytic.first_mut() {
            *g += 1e-2 * (1.0 + g.abs());
        }
    }
}

fn check(
    f: impl Fn(&[f64]) -> Result<f64>,
    point: &[f64],
    mut analytic: Vec<f64>,
    step: f64,
    corrupted: bool,
) -> Result<GradCheckReport> {
    corrupt(&mut analytic, corrupted);
    let idx: Vec<usize> = (0..point.len()).collect();
    central_difference_report(f, point, &analytic, &idx, &|i| format!("[{i}]"), step)
}

fn balanced_sample<R: Rng>(rng: &mut R, step: f64, bad: bool) -> Result<GradCheckReport> {
    let cfg = BalancedL1::default();
    // Stay clear of zero and of the branch point.
    let delta = loop {
        let d = rng.random_range(0.01..3.0);
        if (d - cfg.beta()).abs() > 1e-3 {
            break d;
        }
    };
    let (_, g) = balanced_l1(delta, &cfg)?;
    check(|x| Ok(balanced_l1(x[0], &cfg)?.0), &[delta], vec![g], step, bad)
}

fn chamfer_sample<R: Rng>(rng: &mut R, step: f64, bad: bool) -> Result<GradCheckReport> {
    let (np, nq) = (rng.random_range(2..7), rng.random_range(2..7));
    let point: Vec<f64> = (0..3 * (np + nq)).map(|_| rng.random_range(-3.0..3.0)).collect();
    let split = |x: &[f64]| -> Result<(PointSet, PointSet)> {
        let pts = |s: &[f64]| s.chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        Ok((PointSet::new(pts(&x[..3 * np]))?, PointSet::new(pts(&x[3 * np..]))?))
    };
    let (p, q) = split(&point)?;
    let r = chamfer(&p, &q);
    let analytic = r.grad_p.iter().chain(&r.grad_q).flat_map(|g| g.iter().copied()).collect();
    check(
        |x| {
            let (p, q) = split(x)?;
            Ok(chamfer(&p, &q).value)
        },
        &point,
        analytic,
        step,
        bad,
    )
}

fn focal_sample<R: Rng>(rng: &mut R, step: f64, bad: bool) -> Result<GradCheckReport> {
    let n = rng.random_range(2..7);
    let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let target = rng.random_range(0..n);
    let cfg = FocalConfig {
        gamma: rng.random_range(0.0..3.0),
        alpha: rng.random_range(0.1..1.0),
    };
    let (_, g) = focal(&logits, target, &cfg)?;
    check(|x| Ok(focal(x, target, &cfg)?.0), &logits, g, step, bad)
}

fn dice_sample<R: Rng>(rng: &mut R, step: f64, bad: bool) -> Result<GradCheckReport> {
    let n = rng.random_range(2..10);
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
    let g: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let cfg = DiceConfig {
        epsilon: rng.random_range(0.1..2.0),
    };
    let (_, grad) = dice(&p, &g, &cfg)?;
    check(|x| Ok(dice(x, &g, &cfg)?.0), &p, grad, step, bad)
}

fn uncertainty_sample<R: Rng>(rng: &mut R, step: f64, bad: bool) -> Result<GradCheckReport> {
    // Point = [L_1..L_4, s_1..s_4].
    let mut point: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..10.0)).collect();
    point.extend((0..4).map(|_| rng.random_range(-2.0..2.0)));
    let eval = |x: &[f64]| {
        let losses: BTreeMap<Task, f64> = Task::ALL.iter().zip(&x[..4]).map(|(t, v)| (*t, *v)).collect();
        let state = UncertaintyState {
            log_variances: Task::ALL.iter().zip(&x[4..]).map(|(t, v)| (*t, *v)).collect(),
        };
        combine_uncertainty(&losses, &state)
    };
    let c = eval(&point)?;
    let analytic = Task::ALL
        .iter()
        .map(|t| c.d_losses[t])
        .chain(Task::ALL.iter().map(|t| c.d_log_variances[t]))
        .collect();
    check(|x| Ok(eval(x)?.total), &point, analytic, step, bad)
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn flat_lstm(p: &LstmParameters) -> Vec<f64> {
    p.slices().iter().flat_map(|(_, s)| s.iter().copied()).collect()
}

fn set_lstm(p: &mut LstmParameters, flat: &[f64]) {
    let mut at = 0;
    for (_, s) in p.slices_mut() {
        let n = s.len();
        s.copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

/// Objective `sum(R * fused)` over `T` frames of `K = 2` anchors.
fn lstm_sample<R: Rng>(rng: &mut R, frames: usize, step: f64, bad: bool) -> Result<GradCheckReport> {
    let (k, c, h) = (2, 4, 3);
    let mut params = LstmParameters::init(c, h, rng);
    // Keep the projection away from the ReLU kink.
    params.projection_bias.mapv_inplace(|b| b + 0.5);
    let xs: Vec<Array2<f64>> = (0..frames).map(|_| random_matrix(rng, k, c)).collect();
    let weights = random_matrix(rng, k, c);
    let value = |p: &LstmParameters| -> Result<f64> {
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let (fused, _) = fuse_frames(&views, p)?;
        Ok((&fused * &weights).sum())
    };
    let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
    let (_, cache) = fuse_frames(&views, &params)?;
    let analytic = flat_lstm(&fuse_backward(&cache, &weights, &params));
    let point = flat_lstm(&params);
    check(
        |x| {
            let mut p = params.clone();
            set_lstm(&mut p, x);
            value(&p)
        },
        &point,
        analytic,
        step,
        bad,
    )
}

/// Objective `sum(R * raw)` through the hidden layer; parameters and input
/// features are both checked.
fn heads_sample<R: Rng>(rng: &mut R, step: f64, bad: bool) -> Result<GradCheckReport> {
    let anchors = build_default_anchors(&AnchorLayout {
        count: 3,
        lateral_span: [-2.0, 2.0],
        stations: vec![5.0, 15.0],
    })?;
    let layout = HeadLayout {
        stations: 2,
        classes: 2,
    };
    let c = 5;
    let params = HeadParameters::init(c, layout, true, rng);
    let features = random_matrix(rng, 3, c);
    let weights = random_matrix(rng, 3, layout.width());
    let flat_params = |p: &HeadParameters| -> Vec<f64> { p.slices().iter().flat_map(|(_, s)| s.iter().copied()).collect() };
    let n_params = flat_params(&params).len();
    let unpack = |x: &[f64]| -> (HeadParameters, Array2<f64>) {
        let mut p = params.clone();
        let mut at = 0;
        for (_, s) in p.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&x[at..at + n]);
            at += n;
        }
        let f = Array2::from_shape_vec((3, c), x[at..].to_vec()).expect("shape");
        (p, f)
    };
    let (_, cache) = forward(features.view(), &params, &anchors)?;
    let (g, d_features) = backward(&cache, &weights, &params);
    let analytic: Vec<f64> = flat_params(&g).into_iter().chain(d_features.iter().copied()).collect();
    let point: Vec<f64> = flat_params(&params).into_iter().chain(features.iter().copied()).collect();
    debug_assert_eq!(point.len(), n_params + 3 * c);
    check(
        |x| {
            let (p, f) = unpack(x);
            let (o, _) = forward(f.view(), &p, &anchors)?;
            Ok((&o.raw * &weights).sum())
        },
        &point,
        analytic,
        step,
        bad,
    )
}

fn run_operation(op: &str, options: &GradcheckOptions) -> Result<OperationCheck> {
    // Independent stream per operation so adding one leaves the others.
    let tag = OPERATIONS.iter().position(|o| *o == op).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_mul(1000).wrapping_add(tag));
    let bad = options.corrupt.as_deref() == Some(op);
    let step = options.step;
    let mut merged = GradCheckReport::empty(step);
    for i in 0..options.samples {
        let s = match op {
            "balanced_l1" => balanced_sample(&mut rng, step, bad)?,
            "chamfer" => chamfer_sample(&mut rng, step, bad)?,
            "focal" => focal_sample(&mut rng, step, bad)?,
            "dice" => dice_sample(&mut rng, step, bad)?,
            "uncertainty" => uncertainty_sample(&mut rng, step, bad)?,
            "lstm_t1" => lstm_sample(&mut rng, 1, step, bad)?,
            "lstm_t2" => lstm_sample(&mut rng, 2, step, bad)?,
            "lstm_t3" => lstm_sample(&mut rng, 3, step, bad)?,
            "heads" => heads_sample(&mut rng, step, bad)?,
            other => return Err(crate::error::Error::config("gradcheck.operation", format!("unknown operation {other}"))),
        };
        merged.merge(&format!("sample {i} "), s);
    }
    let (worst_parameter, max_relative_error) = merged
        .worst()
        .map(|(n, e)| (n.to_string(), e))
        .unwrap_or_default();
    Ok(OperationCheck {
        operation: op.to_string(),
        samples: options.samples,
        max_relative_error,
        worst_parameter,
        passed: max_relative_error < options.threshold,
    })
}

pub fn run_gradcheck(options: &GradcheckOptions) -> Result<GradcheckSuite> {
    let operations = OPERATIONS
        .iter()
        .map(|op| run_operation(op, options))
        .collect::<Result<Vec<_>>>()?;
    let worst = operations
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .expect("non-empty suite");
    Ok(GradcheckSuite {
        seed: options.seed,
        step: options.step,
        threshold: options.threshold,
        worst_operation: worst.operation.clone(),
        worst_relative_error: worst.max_relative_error,
        passed: operations.iter().all(|o| o.passed),
        operations,
    })
}
