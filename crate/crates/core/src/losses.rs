//! Task losses with analytic gradients.
//!
//! Each loss returns its value together with the gradient with respect to
//! its differentiable inputs. The tape in [`crate::diff`] is only used by
//! the tests, as an independent route to the same derivatives.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::Lane3D;

/// Balanced L1 with `b` solved from `alpha * ln(b + 1) = gamma`, so the two
/// branches meet at `delta = beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BalancedL1Params", into = "BalancedL1Params")]
pub struct BalancedL1 {
    alpha: f64,
    beta: f64,
    gamma: f64,
    b: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct BalancedL1Params {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl Default for BalancedL1Params {
    fn default() -> Self {
        BalancedL1::default().into()
    }
}

impl TryFrom<BalancedL1Params> for BalancedL1 {
    type Error = Error;
    fn try_from(p: BalancedL1Params) -> Result<Self> {
        BalancedL1::new(p.alpha, p.gamma, p.beta)
    }
}

impl From<BalancedL1> for BalancedL1Params {
    fn from(c: BalancedL1) -> Self {
        BalancedL1Params {
            alpha: c.alpha,
            beta: c.beta,
            gamma: c.gamma,
        }
    }
}

impl Default for BalancedL1 {
    fn default() -> Self {
        Self::new(0.5, 1.5, 1.0).expect("default balanced L1 parameters are valid")
    }
}

impl BalancedL1 {
    pub fn new(alpha: f64, gamma: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("gamma", gamma), ("beta", beta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(
                    format!("loss.balanced_l1.{name}"),
                    "must be positive and finite",
                ));
            }
        }
        let b = (gamma / alpha).exp() - 1.0;
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::config("loss.balanced_l1", "gamma / alpha gives no finite b"));
        }
        Ok(Self {
            alpha,
            beta,
            gamma,
            b,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn b(&self) -> f64 {
        self.b
    }

    /// Left branch and its derivative, valid for any `delta >= 0`.
    pub fn inner_branch(&self, delta: f64) -> (f64, f64) {
        let (a, b, beta) = (self.alpha, self.b, self.beta);
        let u = b * delta / beta + 1.0;
        let value = a / b * (b * delta + 1.0) * u.ln() - a * delta;
        let slope = a * u.ln() + a * (b * delta + 1.0) / (b * delta + beta) - a;
        (value, slope)
    }

    /// Right (linear) branch and its derivative.
    pub fn outer_branch(&self, delta: f64) -> (f64, f64) {
        (
            self.gamma * delta + self.gamma / self.b - self.alpha * self.beta,
            self.gamma,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalConfig {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiceConfig {
    pub epsilon: f64,
}

impl Default for DiceConfig {
    fn default() -> Self {
        Self { epsilon: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub balanced_l1: BalancedL1,
    pub focal: FocalConfig,
    pub dice: DiceConfig,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal.gamma >= 0.0 && self.focal.alpha > 0.0) {
            return Err(Error::config("loss.focal", "need gamma >= 0 and alpha > 0"));
        }
        if !(self.dice.epsilon > 0.0) {
            return Err(Error::config("loss.dice.epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// The four supervised tasks combined by uncertainty weighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Curve,
    Classification,
    Visibility,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::Regression,
        Task::Curve,
        Task::Classification,
        Task::Visibility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Curve => "curve",
            Task::Classification => "classification",
            Task::Visibility => "visibility",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Learnable log-variances `s_i`, one per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyState {
    pub log_variances: BTreeMap<Task, f64>,
}

impl Default for UncertaintyState {
    fn default() -> Self {
        Self::zeros(&Task::ALL)
    }
}

impl UncertaintyState {
    pub fn zeros(tasks: &[Task]) -> Self {
        Self {
            log_variances: tasks.iter().map(|&t| (t, 0.0)).collect(),
        }
    }

    pub fn get(&self, task: Task) -> f64 {
        self.log_variances.get(&task).copied().unwrap_or(0.0)
    }
}

/// Gradients of the uncertainty-weighted total.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedLoss {
    pub total: f64,
    pub d_losses: BTreeMap<Task, f64>,
    pub d_log_variances: BTreeMap<Task, f64>,
}

/// `sum_i exp(-s_i) * L_i + s_i`.
pub fn combine_uncertainty(
    losses: &BTreeMap<Task, f64>,
    state: &UncertaintyState,
) -> Result<CombinedLoss> {
    if !losses.keys().eq(state.log_variances.keys()) {
        let l: Vec<_> = losses.keys().map(|t| t.name()).collect();
        let s: Vec<_> = state.log_variances.keys().map(|t| t.name()).collect();
        return Err(Error::KeyMismatch(format!("losses {l:?} vs state {s:?}")));
    }
    let mut total = 0.0;
    let mut d_losses = BTreeMap::new();
    let mut d_log_variances = BTreeMap::new();
    for (&task, &loss) in losses {
        if loss < 0.0 {
            return Err(Error::domain("combine_uncertainty", format!("{task} loss {loss} < 0")));
        }
        let s = state.log_variances[&task];
        let w = (-s).exp();
        total += w * loss + s;
        d_losses.insert(task, w);
        d_log_variances.insert(task, 1.0 - w * loss);
    }
    Ok(CombinedLoss {
        total,
        d_losses,
        d_log_variances,
    })
}

/// Balanced L1 of a non-negative residual magnitude, with its derivative.
pub fn balanced_l1(delta: f64, config: &BalancedL1) -> Result<(f64, f64)> {
    if !(delta >= 0.0) {
        return Err(Error::domain("balanced_l1", format!("residual {delta} is negative")));
    }
    Ok(if delta < config.beta {
        config.inner_branch(delta)
    } else {
        config.outer_branch(delta)
    })
}

/// Per-entry regression penalty used by [`weighted_residual_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegressionPenalty {
    Balanced(BalancedL1),
    L1,
}

impl RegressionPenalty {
    fn eval(&self, delta: f64) -> Result<(f64, f64)> {
        match self {
            RegressionPenalty::Balanced(c) => balanced_l1(delta, c),
            RegressionPenalty::L1 => Ok((delta, 1.0)),
        }
    }
}

/// Weighted mean of `penalty(|pred - target|)`; returns the value and the
/// gradient with respect to `pred`. The gradient at a zero residual is 0.
pub fn weighted_residual_loss(
    pred: &[f64],
    target: &[f64],
    weights: &[f64],
    penalty: RegressionPenalty,
) -> Result<(f64, Vec<f64>)> {
    check_len("regression target", pred.len(), target.len())?;
    check_len("regression mask", pred.len(), weights.len())?;
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::domain("regression", "mask weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Empty("regression mask has zero total weight"));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        if weights[i] == 0.0 {
            continue;
        }
        let r = pred[i] - target[i];
        let (l, dl) = penalty.eval(r.abs())?;
        value += weights[i] * l;
        let sign = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad[i] = weights[i] * dl * sign / total;
    }
    Ok((value / total, grad))
}

/// Balanced L1 over per-entry residuals, weighted by `mask`.
pub fn balanced_l1_vector(
    pred: &[f64],
    target: &[f64],
    mask: &[f64],
    config: &BalancedL1,
) -> Result<(f64, Vec<f64>)> {
    weighted_residual_loss(pred, target, mask, RegressionPenalty::Balanced(*config))
}

/// Non-empty set of 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    points: Vec<[f64; 3]>,
}

impl PointSet {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point set"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChamferResult {
    pub value: f64,
    pub grad_p: Vec<[f64; 3]>,
    pub grad_q: Vec<[f64; 3]>,
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nearest(p: &[f64; 3], set: &[[f64; 3]]) -> (usize, f64) {
    let mut best = (0, sq_dist(p, &set[0]));
    for (i, q) in set.iter().enumerate().skip(1) {
        let d = sq_dist(p, q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Mean nearest-neighbour squared distance from `from` into `to`, with
/// gradients for both sides.
fn directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let scale = 1.0 / from.len() as f64;
    let mut g_from = vec![[0.0; 3]; from.len()];
    let mut g_to = vec![[0.0; 3]; to.len()];
    let mut sum = 0.0;
    for (i, a) in from.iter().enumerate() {
        let (j, d) = nearest(a, to);
        sum += d;
        for c in 0..3 {
            let g = 2.0 * scale * (a[c] - to[j][c]);
            g_from[i][c] += g;
            g_to[j][c] -= g;
        }
    }
    (scale * sum, g_from, g_to)
}

/// Bidirectional mean of nearest-neighbour squared distances. Gradients
/// reach both sets through the argmin pairs (ties to the lowest index).
pub fn chamfer(p: &PointSet, q: &PointSet) -> ChamferResult {
    let mut grad_p = vec![[0.0; 3]; p.len()];
    let mut grad_q = vec![[0.0; 3]; q.len()];
    let (ab, ga, gb) = directed(&p.points, &q.points);
    let (ba, hb, ha) = directed(&q.points, &p.points);
    for i in 0..p.len() {
        for c in 0..3 {
            grad_p[i][c] = ga[i][c] + ha[i][c];
        }
    }
    for j in 0..q.len() {
        for c in 0..3 {
            grad_q[j][c] = gb[j][c] + hb[j][c];
        }
    }
    let value = ab + ba;
    ChamferResult {
        value,
        grad_p,
        grad_q,
    }
}

/// Chamfer between a predicted lane (all stations) and the visible part of
/// a ground-truth lane. Returns the value and gradients with respect to the
/// predicted lateral and height values.
pub fn chamfer_curve(pred: &Lane3D, gt: &Lane3D) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let visible: Vec<[f64; 3]> = gt
        .points()
        .zip(gt.visibility())
        .filter(|(_, &v)| v >= 0.5)
        .map(|(p, _)| p)
        .collect();
    if visible.is_empty() {
        return Err(Error::Empty("ground-truth lane has no visible points"));
    }
    chamfer_to_points(pred, PointSet { points: visible })
}

/// Chamfer between all points of `pred` and a fixed target set.
pub fn chamfer_to_points(pred: &Lane3D, target: PointSet) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let p = PointSet::new(pred.points().collect())?;
    let r = chamfer(&p, &target);
    let dx = r.grad_p.iter().map(|g| g[0]).collect();
    let dz = r.grad_p.iter().map(|g| g[2]).collect();
    Ok((r.value, dx, dz))
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Softmax cross-entropy, used as the reference for focal with
/// `gamma = 0, alpha = 1`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    -log_softmax(logits)[target]
}

/// `-alpha * (1 - p_t)^gamma * ln(p_t)` on softmax probabilities, with the
/// gradient with respect to the logits.
pub fn focal(logits: &[f64], target: usize, config: &FocalConfig) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::Shape {
            context: "focal categories",
            expected: 2,
            actual: logits.len(),
        });
    }
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange {
            what: "focal target",
            index: target,
            len: logits.len(),
        });
    }
    let logp = log_softmax(logits);
    let log_pt = logp[target];
    let pt = log_pt.exp();
    let q = 1.0 - pt;
    let (a, g) = (config.alpha, config.gamma);
    let value = -a * q.powf(g) * log_pt;
    // dL/dp_t * p_t, free of 1/p_t
    let focus = if g == 0.0 {
        0.0
    } else {
        g * pt * q.powf(g - 1.0) * log_pt
    };
    let dl_dpt_pt = -a * (q.powf(g) - focus);
    let grad = logp
        .iter()
        .enumerate()
        .map(|(k, lp)| {
            let pk = lp.exp();
            let kron = if k == target { 1.0 } else { 0.0 };
            dl_dpt_pt * (kron - pk)
        })
        .collect();
    Ok((value, grad))
}

/// Soft Dice `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)` with the
/// gradient with respect to `p`.
pub fn dice(probabilities: &[f64], target: &[f64], config: &DiceConfig) -> Result<(f64, Vec<f64>)> {
    check_len("dice target", probabilities.len(), target.len())?;
    if !(config.epsilon > 0.0) {
        return Err(Error::config("loss.dice.epsilon", "must be positive"));
    }
    let eps = config.epsilon;
    let inter: f64 = probabilities.iter().zip(target).map(|(p, g)| p * g).sum();
    let sp: f64 = probabilities.iter().sum();
    let sg: f64 = target.iter().sum();
    let num = 2.0 * inter + eps;
    let den = sp + sg + eps;
    let grad = target
        .iter()
        .map(|g| -(2.0 * g * den - num) / (den * den))
        .collect();
    Ok((1.0 - num / den, grad))
}
