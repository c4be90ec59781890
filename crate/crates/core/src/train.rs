//! Training loop: per-scene analytic gradients, uncertainty-weighted task
//! combination, the progressive curve-loss ramp, and the ablation ladder.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::fuse_backward;
use crate::geometry::{bracket, lerp, resample_lane, AnchorSet, Lane3D, DEFAULT_VISIBILITY_THRESHOLD};
use crate::heads::{assign_targets, backward, AnchorTarget, HeadLayout, BACKGROUND};
use crate::losses::{
    chamfer_to_points, combine_uncertainty, dice, focal, weighted_residual_loss, LossConfig, PointSet,
    RegressionPenalty, Task, UncertaintyState,
};
use crate::diff::sigmoid;
use crate::metrics::{transport_lane, EvalConfig};
use crate::model::{evaluate_model, windows, EvalSummary, Model, ModelConfig};
use crate::synth::SceneSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Linear ramp of the curve-loss weight over `[ramp_start, ramp_end]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EscopSchedule {
    pub ramp_start: usize,
    pub ramp_end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_balanced_l1: bool,
    pub use_chamfer: bool,
    pub use_uncertainty: bool,
    pub use_lstm_fusion: bool,
}

impl Default for EscopSchedule {
    fn default() -> Self {
        Self {
            ramp_start: 20,
            ramp_end: 60,
        }
    }
}

impl AblationFlags {
    pub const FULL: AblationFlags = AblationFlags {
        use_balanced_l1: true,
        use_chamfer: true,
        use_uncertainty: true,
        use_lstm_fusion: true,
    };
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub escop: EscopSchedule,
    pub ablation: AblationFlags,
    /// Anchors within this mean lateral distance (m) of a lane that are not
    /// its assigned anchor are left out of every loss.
    pub ignore_distance: f64,
    /// Weight of the optional inter-frame consistency penalty; 0 disables.
    pub consistency_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            escop: EscopSchedule::default(),
            ablation: AblationFlags::FULL,
            ignore_distance: 1.0,
            consistency_weight: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and non-negative"));
        }
        if self.escop.ramp_start > self.escop.ramp_end || self.escop.ramp_end > self.epochs {
            return Err(Error::config(
                "train.escop",
                "need ramp_start <= ramp_end <= epochs",
            ));
        }
        if !(self.ignore_distance > 0.0) {
            return Err(Error::config("train.ignore_distance", "must be positive"));
        }
        if !(self.consistency_weight >= 0.0) {
            return Err(Error::config("train.consistency_weight", "must be non-negative"));
        }
        Ok(())
    }
}

/// Curve-loss weight at `epoch`: 0 before the ramp, 1 after it.
pub fn escop_weight(epoch: usize, schedule: &EscopSchedule) -> f64 {
    let (a, b) = (schedule.ramp_start, schedule.ramp_end);
    if epoch < a {
        0.0
    } else if epoch >= b {
        1.0
    } else {
        (epoch - a) as f64 / (b - a) as f64
    }
}

/// Supervision for one positive anchor.
#[derive(Clone, Debug)]
struct Positive {
    anchor: usize,
    dx: Vec<f64>,
    dz: Vec<f64>,
    visibility: Vec<f64>,
    category: usize,
    /// Equidistant resampling of the visible ground truth.
    curve: Option<PointSet>,
}

/// Assignment and targets of one scene's last frame, computed once.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    scene: SceneSequence,
    positives: Vec<Positive>,
    /// `None` for ignored anchors.
    classes: Vec<Option<usize>>,
}

fn equidistant_curve(lane: &Lane3D) -> Result<Option<PointSet>> {
    let vis: Vec<usize> = (0..lane.len())
        .filter(|&j| lane.is_visible(j, DEFAULT_VISIBILITY_THRESHOLD))
        .collect();
    let (Some(&a), Some(&b)) = (vis.first(), vis.last()) else {
        return Ok(None);
    };
    let (ya, yb) = (lane.stations()[a], lane.stations()[b]);
    let n = (b - a + 1).max(2);
    let targets: Vec<f64> = (0..n)
        .map(|i| if i + 1 == n { yb } else { ya + (yb - ya) * i as f64 / (n - 1) as f64 })
        .collect();
    let r = resample_lane(lane, &targets)?;
    Ok(Some(PointSet::new(r.points().collect())?))
}

pub fn prepare_scene(
    scene: &SceneSequence,
    anchors: &AnchorSet,
    ignore_distance: f64,
) -> Result<PreparedScene> {
    let gts = &scene.last().lanes;
    let targets = assign_targets(anchors, gts, ignore_distance)?;
    let mut positives = Vec::new();
    let mut classes = Vec::with_capacity(targets.len());
    for (k, t) in targets.iter().enumerate() {
        match *t {
            AnchorTarget::Positive(g) => {
                let (dx, dz) = anchors.encode(k, &gts[g])?;
                positives.push(Positive {
                    anchor: k,
                    dx,
                    dz,
                    visibility: gts[g]
                        .visibility()
                        .iter()
                        .map(|&v| if v >= DEFAULT_VISIBILITY_THRESHOLD { 1.0 } else { 0.0 })
                        .collect(),
                    category: gts[g].category(),
                    curve: equidistant_curve(&gts[g])?,
                });
                classes.push(Some(gts[g].category()));
            }
            AnchorTarget::Ignore => classes.push(None),
            AnchorTarget::Background => classes.push(Some(BACKGROUND)),
        }
    }
    Ok(PreparedScene {
        scene: scene.clone(),
        positives,
        classes,
    })
}

/// Per-task multipliers applied to each scene's task gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWeights {
    pub tasks: BTreeMap<Task, f64>,
    pub consistency: f64,
}

/// Raw (unweighted) scene losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneLosses {
    pub regression: f64,
    pub curve: f64,
    pub classification: f64,
    pub visibility: f64,
    pub consistency: f64,
}

impl SceneLosses {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Regression => self.regression,
            Task::Curve => self.curve,
            Task::Classification => self.classification,
            Task::Visibility => self.visibility,
        }
    }

    fn add(&mut self, o: &SceneLosses, scale: f64) {
        self.regression += scale * o.regression;
        self.curve += scale * o.curve;
        self.classification += scale * o.classification;
        self.visibility += scale * o.visibility;
        self.consistency += scale * o.consistency;
    }
}

/// Loss terms of one scene and the gradient of `sum_i w_i L_i` with
/// respect to every model parameter (log-variances excluded).
pub fn scene_gradients(
    model: &Model,
    anchors: &AnchorSet,
    prep: &PreparedScene,
    clip_len: usize,
    loss: &LossConfig,
    flags: &AblationFlags,
    weights: &TaskWeights,
) -> Result<(SceneLosses, Model)> {
    let layout = model.layout();
    let s = layout.stations;
    let wins = windows(&prep.scene, clip_len)?;
    let window = wins.last().expect("at least one window");
    let (out, cache) = model.forward(anchors, window)?;
    let raw = &out.raw;
    let mut d_raw = Array2::zeros(raw.raw_dim());
    let mut losses = SceneLosses::default();
    let w = |t: Task| weights.tasks.get(&t).copied().unwrap_or(0.0);

    // Offsets, masked by ground-truth visibility.
    if !prep.positives.is_empty() {
        let mut pred = Vec::new();
        let mut target = Vec::new();
        let mut mask = Vec::new();
        for p in &prep.positives {
            pred.extend(out.dx(p.anchor).iter().chain(out.dz(p.anchor).iter()));
            target.extend(p.dx.iter().chain(&p.dz));
            mask.extend(p.visibility.iter().chain(&p.visibility));
        }
        if mask.iter().any(|&m| m > 0.0) {
            let penalty = if flags.use_balanced_l1 {
                RegressionPenalty::Balanced(loss.balanced_l1)
            } else {
                RegressionPenalty::L1
            };
            let (v, g) = weighted_residual_loss(&pred, &target, &mask, penalty)?;
            losses.regression = v;
            let wr = w(Task::Regression);
            for (i, p) in prep.positives.iter().enumerate() {
                for j in 0..2 * s {
                    d_raw[[p.anchor, j]] += wr * g[i * 2 * s + j];
                }
            }
        }
    }

    // Chamfer between the predicted points at visible stations and the
    // equidistant ground-truth curve.
    if flags.use_chamfer {
        let with_curve: Vec<&Positive> = prep.positives.iter().filter(|p| p.curve.is_some()).collect();
        let wc = w(Task::Curve) / with_curve.len().max(1) as f64;
        for p in &with_curve {
            let idx: Vec<usize> = (0..s).filter(|&j| p.visibility[j] > 0.0).collect();
            let st: Vec<f64> = idx.iter().map(|&j| anchors.stations()[j]).collect();
            let x: Vec<f64> = idx
                .iter()
                .map(|&j| anchors.base_lateral(p.anchor)[j] + out.dx(p.anchor)[j])
                .collect();
            let z: Vec<f64> = idx
                .iter()
                .map(|&j| anchors.base_height(p.anchor)[j] + out.dz(p.anchor)[j])
                .collect();
            let lane = Lane3D::new(st, x, z, vec![1.0; idx.len()], p.category)?;
            let target = p.curve.clone().expect("filtered");
            let (v, gx, gz) = chamfer_to_points(&lane, target)?;
            losses.curve += v / with_curve.len() as f64;
            for (r, &j) in idx.iter().enumerate() {
                d_raw[[p.anchor, j]] += wc * gx[r];
                d_raw[[p.anchor, s + j]] += wc * gz[r];
            }
        }
    }

    // Focal over every non-ignored anchor.
    let scored: Vec<(usize, usize)> = prep
        .classes
        .iter()
        .enumerate()
        .filter_map(|(k, c)| c.map(|c| (k, c)))
        .collect();
    if !scored.is_empty() {
        let n = scored.len() as f64;
        let wf = w(Task::Classification) / n;
        for &(k, c) in &scored {
            let logits = out.class_logits(k).to_vec();
            let (v, g) = focal(&logits, c, &loss.focal)?;
            losses.classification += v / n;
            for (i, gi) in g.iter().enumerate() {
                d_raw[[k, 3 * s + i]] += wf * gi;
            }
        }
    }

    // Dice on the visibility of the positive anchors.
    if !prep.positives.is_empty() {
        let mut probs = Vec::new();
        let mut target = Vec::new();
        for p in &prep.positives {
            probs.extend(out.visibility_logits(p.anchor).iter().map(|&l| sigmoid(l)));
            target.extend(&p.visibility);
        }
        let (v, g) = dice(&probs, &target, &loss.dice)?;
        losses.visibility = v;
        let wv = w(Task::Visibility);
        for (i, p) in prep.positives.iter().enumerate() {
            for j in 0..s {
                let q = probs[i * s + j];
                d_raw[[p.anchor, 2 * s + j]] += wv * g[i * s + j] * q * (1.0 - q);
            }
        }
    }

    // Optional: squared lateral gap to the previous window's prediction of
    // the same anchor carried into this frame (held fixed).
    if weights.consistency > 0.0 && wins.len() >= 2 && !prep.positives.is_empty() {
        let prev = model.predict(anchors, &wins[wins.len() - 2])?;
        let motion = prep.scene.ego_motion[prep.scene.len() - 1];
        let mut terms = Vec::new();
        for p in &prep.positives {
            let k = p.anchor;
            let x: Vec<f64> = (0..s).map(|j| anchors.base_lateral(k)[j] + prev.dx(k)[j]).collect();
            let z: Vec<f64> = (0..s).map(|j| anchors.base_height(k)[j] + prev.dz(k)[j]).collect();
            let old = Lane3D::new(anchors.stations().to_vec(), x, z, vec![1.0; s], 0)?;
            let carried = transport_lane(&old, &motion)?;
            let (lo, hi) = (carried.stations()[0], carried.stations()[s - 1]);
            for j in 0..s {
                let y = anchors.stations()[j];
                if p.visibility[j] > 0.0 && y >= lo && y <= hi {
                    let (i, wgt) = bracket(carried.stations(), y);
                    let target = lerp(carried.lateral(), i, wgt);
                    let cur = anchors.base_lateral(k)[j] + out.dx(k)[j];
                    terms.push((k, j, cur - target));
                }
            }
        }
        if !terms.is_empty() {
            let n = terms.len() as f64;
            for &(k, j, d) in &terms {
                losses.consistency += d * d / n;
                d_raw[[k, j]] += weights.consistency * 2.0 * d / n;
            }
        }
    }

    let (head_grads, d_features) = backward(&cache.heads, &d_raw, &model.heads);
    let mut grads = model.zeros_like();
    grads.heads = head_grads;
    if let Some(fc) = &cache.fusion {
        grads.lstm = fuse_backward(fc, &d_features, &model.lstm);
    }
    Ok((losses, grads))
}

/// Objective value of a batch given the averaged raw task losses.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchObjective {
    pub total: f64,
    /// Derivative of the total with respect to each log-variance.
    pub d_log_variances: BTreeMap<Task, f64>,
}

/// Tasks entering the combination this epoch. The curve task is left out
/// (and its log-variance frozen) while its ramp weight is zero.
fn active_tasks(flags: &AblationFlags, ramp: f64) -> Vec<Task> {
    Task::ALL
        .into_iter()
        .filter(|&t| t != Task::Curve || (flags.use_chamfer && ramp > 0.0))
        .collect()
}

/// Gradient multipliers of each raw task loss in the batch objective.
pub fn task_weights(
    flags: &AblationFlags,
    uncertainty: &UncertaintyState,
    ramp: f64,
    consistency_weight: f64,
    batch: usize,
) -> TaskWeights {
    let b = batch as f64;
    let tasks = active_tasks(flags, ramp)
        .into_iter()
        .map(|t| {
            let scale = if t == Task::Curve { ramp } else { 1.0 };
            let w = if flags.use_uncertainty {
                (-uncertainty.get(t)).exp()
            } else {
                1.0
            };
            (t, w * scale / b)
        })
        .collect();
    TaskWeights {
        tasks,
        consistency: consistency_weight / b,
    }
}

pub fn batch_objective(
    mean: &SceneLosses,
    flags: &AblationFlags,
    uncertainty: &UncertaintyState,
    ramp: f64,
    consistency_weight: f64,
) -> Result<BatchObjective> {
    let active = active_tasks(flags, ramp);
    let effective: BTreeMap<Task, f64> = active
        .iter()
        .map(|&t| (t, if t == Task::Curve { ramp * mean.curve } else { mean.get(t) }))
        .collect();
    let consistency = consistency_weight * mean.consistency;
    if flags.use_uncertainty {
        let state = UncertaintyState {
            log_variances: active.iter().map(|&t| (t, uncertainty.get(t))).collect(),
        };
        let c = combine_uncertainty(&effective, &state)?;
        Ok(BatchObjective {
            total: c.total + consistency,
            d_log_variances: c.d_log_variances,
        })
    } else {
        Ok(BatchObjective {
            total: effective.values().sum::<f64>() + consistency,
            d_log_variances: BTreeMap::new(),
        })
    }
}

/// Plain gradient descent or Adam over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: Optimizer, lr: f64, n: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            Optimizer::Adam => {
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                    self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Descend on the log-variances alone with the task losses held fixed.
pub fn fit_uncertainty(
    losses: &BTreeMap<Task, f64>,
    initial: &UncertaintyState,
    optimizer: Optimizer,
    learning_rate: f64,
    steps: usize,
) -> Result<(UncertaintyState, f64)> {
    let mut state = initial.clone();
    let tasks: Vec<Task> = state.log_variances.keys().copied().collect();
    let mut opt = OptimizerState::new(optimizer, learning_rate, tasks.len());
    let mut s: Vec<f64> = tasks.iter().map(|t| state.get(*t)).collect();
    for _ in 0..steps {
        let c = combine_uncertainty(losses, &state)?;
        let g: Vec<f64> = tasks.iter().map(|t| c.d_log_variances[t]).collect();
        opt.step(&mut s, &g);
        for (t, v) in tasks.iter().zip(&s) {
            state.log_variances.insert(*t, *v);
        }
    }
    let total = combine_uncertainty(losses, &state)?.total;
    Ok((state, total))
}

/// Full-batch Adam on the regression loss of a single scene until it drops
/// below `tolerance` or `max_steps` updates have been taken. Returns the
/// number of updates and the last measured loss.
#[allow(clippy::too_many_arguments)]
pub fn fit_regression(
    model: &mut Model,
    anchors: &AnchorSet,
    prep: &PreparedScene,
    clip_len: usize,
    loss: &LossConfig,
    learning_rate: f64,
    max_steps: usize,
    tolerance: f64,
) -> Result<(usize, f64)> {
    let flags = AblationFlags {
        use_chamfer: false,
        use_uncertainty: false,
        ..AblationFlags::FULL
    };
    let weights = TaskWeights {
        tasks: BTreeMap::from([(Task::Regression, 1.0)]),
        consistency: 0.0,
    };
    let mut params = model.flatten();
    let mut opt = OptimizerState::new(Optimizer::Adam, learning_rate, params.len());
    for step in 0..=max_steps {
        let (l, grads) = scene_gradients(model, anchors, prep, clip_len, loss, &flags, &weights)?;
        if !l.regression.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                step,
                detail: format!("regression loss {}", l.regression),
            });
        }
        if l.regression < tolerance || step == max_steps {
            return Ok((step, l.regression));
        }
        opt.step(&mut params, &grads.flatten());
        model.assign(&params)?;
    }
    unreachable!("the loop returns on its last iteration")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub escop_weight: f64,
    pub total: f64,
    pub regression: f64,
    pub curve: f64,
    pub classification: f64,
    pub visibility: f64,
    pub consistency: f64,
    pub log_variances: BTreeMap<Task, f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
}

/// Everything besides the scenes that a training run needs.
#[derive(Clone, Debug)]
pub struct TrainSetup<'a> {
    pub train: &'a TrainConfig,
    pub model: &'a ModelConfig,
    pub loss: &'a LossConfig,
    pub anchors: &'a AnchorSet,
    pub layout: HeadLayout,
    pub channels: usize,
    pub clip_len: usize,
    pub seed: u64,
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Train from a fresh initialisation.
pub fn train(setup: &TrainSetup<'_>, scenes: &[SceneSequence]) -> Result<TrainOutcome> {
    let model = Model::init(
        setup.model,
        setup.channels,
        setup.layout,
        setup.train.ablation.use_lstm_fusion,
        setup.seed,
    );
    train_from(setup, scenes, model)
}

/// Continue training `model`.
pub fn train_from(setup: &TrainSetup<'_>, scenes: &[SceneSequence], mut model: Model) -> Result<TrainOutcome> {
    let cfg = setup.train;
    cfg.validate()?;
    setup.model.validate()?;
    setup.loss.validate()?;
    if scenes.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let prepared = scenes
        .par_iter()
        .map(|s| prepare_scene(s, setup.anchors, cfg.ignore_distance))
        .collect::<Result<Vec<_>>>()?;
    let flags = cfg.ablation;
    let mut flat = model.flatten();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, flat.len());
    let s_offset = flat.len() - Task::ALL.len();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let ramp = if flags.use_chamfer { escop_weight(epoch, &cfg.escop) } else { 0.0 };
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(setup.seed, epoch)));
        let mut epoch_losses = SceneLosses::default();
        let mut epoch_total = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for batch in &batches {
            let weights = task_weights(&flags, &model.uncertainty, ramp, cfg.consistency_weight, batch.len());
            let results = batch
                .par_iter()
                .map(|&i| {
                    scene_gradients(&model, setup.anchors, &prepared[i], setup.clip_len, setup.loss, &flags, &weights)
                })
                .collect::<Result<Vec<_>>>()?;
            // Fixed-order reduction.
            let mut mean = SceneLosses::default();
            let mut grad = vec![0.0; flat.len()];
            for (l, g) in &results {
                mean.add(l, 1.0 / batch.len() as f64);
                for (a, b) in grad.iter_mut().zip(g.flatten()) {
                    *a += b;
                }
            }
            let obj = batch_objective(&mean, &flags, &model.uncertainty, ramp, cfg.consistency_weight)?;
            if !obj.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("total loss {} (regression {}, curve {}, classification {}, visibility {})",
                        obj.total, mean.regression, mean.curve, mean.classification, mean.visibility),
                });
            }
            for (i, t) in Task::ALL.iter().enumerate() {
                grad[s_offset + i] = obj.d_log_variances.get(t).copied().unwrap_or(0.0);
            }
            opt.step(&mut flat, &grad);
            model.assign(&flat)?;
            epoch_losses.add(&mean, 1.0 / batches.len() as f64);
            epoch_total += obj.total / batches.len() as f64;
            step += 1;
        }
        history.push(EpochMetrics {
            epoch,
            escop_weight: ramp,
            total: epoch_total,
            regression: epoch_losses.regression,
            curve: epoch_losses.curve,
            classification: epoch_losses.classification,
            visibility: epoch_losses.visibility,
            consistency: epoch_losses.consistency,
            log_variances: model.uncertainty.log_variances.clone(),
        });
    }
    Ok(TrainOutcome { model, history })
}

pub fn write_history_csv(path: &std::path::Path, history: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "epoch", "escop_weight", "total", "regression", "curve", "classification", "visibility", "consistency",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    header.extend(Task::ALL.iter().map(|t| format!("s_{t}")));
    w.write_record(&header)?;
    for m in history {
        let mut row = vec![
            m.epoch.to_string(),
            m.escop_weight.to_string(),
            m.total.to_string(),
            m.regression.to_string(),
            m.curve.to_string(),
            m.classification.to_string(),
            m.visibility.to_string(),
            m.consistency.to_string(),
        ];
        row.extend(Task::ALL.iter().map(|t| m.log_variances.get(t).copied().unwrap_or(0.0).to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One configuration of the ablation ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub configuration: String,
    pub flags: AblationFlags,
    pub f1: f64,
    pub accuracy: f64,
    pub jitter: Option<f64>,
}

/// The five nested configurations, each adding one component.
pub fn ablation_ladder() -> [(&'static str, AblationFlags); 5] {
    let mut f = AblationFlags {
        use_balanced_l1: false,
        use_chamfer: false,
        use_uncertainty: false,
        use_lstm_fusion: false,
    };
    let base = f;
    f.use_balanced_l1 = true;
    let bl1 = f;
    f.use_chamfer = true;
    let ch = f;
    f.use_uncertainty = true;
    let unc = f;
    f.use_lstm_fusion = true;
    [
        ("baseline", base),
        ("+balanced_l1", bl1),
        ("+chamfer", ch),
        ("+uncertainty", unc),
        ("+lstm_fusion", f),
    ]
}

pub const ABLATION_NESTING: &str =
    "rows are nested: each configuration adds one component to the row above it";

/// Train and evaluate every row of `rows` with the same seed, scenes and
/// budget.
pub fn run_ablation(
    setup: &TrainSetup<'_>,
    rows: &[(&str, AblationFlags)],
    train_scenes: &[SceneSequence],
    eval_scenes: &[SceneSequence],
    eval: &EvalConfig,
) -> Result<Vec<(AblationRow, EvalSummary)>> {
    rows.iter()
        .map(|(name, flags)| {
            let mut cfg = setup.train.clone();
            cfg.ablation = *flags;
            let s = TrainSetup { train: &cfg, ..setup.clone() };
            let outcome = train(&s, train_scenes)?;
            let summary = evaluate_model(&outcome.model, setup.anchors, eval_scenes, setup.clip_len, eval)?;
            Ok((
                AblationRow {
                    configuration: name.to_string(),
                    flags: *flags,
                    f1: summary.overall.report.f1,
                    accuracy: summary.overall.report.accuracy,
                    jitter: summary.overall.jitter,
                },
                summary,
            ))
        })
        .collect()
}
