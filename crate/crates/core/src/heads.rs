//! Per-anchor detection heads and ground-truth assignment.
//!
//! The heads share one optional ReLU hidden layer of width `C`; the three
//! affine heads (offsets, visibility logits, class logits) are stacked into
//! a single output map whose columns are laid out as
//! `[dx (S) | dz (S) | visibility (S) | class (N)]`, with class 0 meaning
//! background.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::assignment::min_cost_pairs;
use crate::error::{check_len, Error, Result};
use crate::geometry::{resample_lane, AnchorPrediction, AnchorSet, Lane3D};

pub const BACKGROUND: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || d.sample(rng)),
            bias: Array1::from_shape_simple_fn(outputs, || d.sample(rng)),
        }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }
}

/// Output widths of the heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub stations: usize,
    /// Including the background class.
    pub classes: usize,
}

impl HeadLayout {
    pub fn width(&self) -> usize {
        3 * self.stations + self.classes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParameters {
    pub hidden: Option<Dense>,
    pub output: Dense,
    layout: HeadLayout,
}

impl HeadParameters {
    pub fn zeros(channels: usize, layout: HeadLayout, hidden: bool) -> Self {
        Self {
            hidden: hidden.then(|| Dense::zeros(channels, channels)),
            output: Dense::zeros(channels, layout.width()),
            layout,
        }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights and biases.
    pub fn init<R: Rng>(channels: usize, layout: HeadLayout, hidden: bool, rng: &mut R) -> Self {
        let hidden = hidden.then(|| Dense::init(channels, channels, rng));
        Self {
            hidden,
            output: Dense::init(channels, layout.width(), rng),
            layout,
        }
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn channels(&self) -> usize {
        self.output.weight.ncols()
    }

    pub fn slices(&self) -> Vec<(&'static str, &[f64])> {
        let mut v = Vec::with_capacity(4);
        if let Some(h) = &self.hidden {
            v.push(("heads.hidden.weight", h.weight.as_slice().unwrap()));
            v.push(("heads.hidden.bias", h.bias.as_slice().unwrap()));
        }
        v.push(("heads.output.weight", self.output.weight.as_slice().unwrap()));
        v.push(("heads.output.bias", self.output.bias.as_slice().unwrap()));
        v
    }

    pub fn slices_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut v = Vec::with_capacity(4);
        if let Some(h) = &mut self.hidden {
            v.push(("heads.hidden.weight", h.weight.as_slice_mut().unwrap()));
            v.push(("heads.hidden.bias", h.bias.as_slice_mut().unwrap()));
        }
        v.push(("heads.output.weight", self.output.weight.as_slice_mut().unwrap()));
        v.push(("heads.output.bias", self.output.bias.as_slice_mut().unwrap()));
        v
    }
}

/// Raw head outputs for `K` anchors (`K x width`).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub raw: Array2<f64>,
    pub layout: HeadLayout,
}

impl HeadOutput {
    pub fn anchors(&self) -> usize {
        self.raw.nrows()
    }

    pub fn dx(&self, k: usize) -> ArrayView1<'_, f64> {
        let s = self.layout.stations;
        self.raw.slice(s![k, 0..s])
    }

    pub fn dz(&self, k: usize) -> ArrayView1<'_, f64> {
        let s = self.layout.stations;
        self.raw.slice(s![k, s..2 * s])
    }

    pub fn visibility_logits(&self, k: usize) -> ArrayView1<'_, f64> {
        let s = self.layout.stations;
        self.raw.slice(s![k, 2 * s..3 * s])
    }

    pub fn class_logits(&self, k: usize) -> ArrayView1<'_, f64> {
        let s = self.layout.stations;
        self.raw.slice(s![k, 3 * s..])
    }

    pub fn prediction(&self, k: usize) -> AnchorPrediction {
        AnchorPrediction {
            anchor: k,
            dx: self.dx(k).to_vec(),
            dz: self.dz(k).to_vec(),
            visibility_logits: self.visibility_logits(k).to_vec(),
            class_logits: self.class_logits(k).to_vec(),
        }
    }

    pub fn predictions(&self) -> Vec<AnchorPrediction> {
        (0..self.anchors()).map(|k| self.prediction(k)).collect()
    }
}

pub struct HeadCache {
    input: Array2<f64>,
    hidden_pre: Option<Array2<f64>>,
    hidden_act: Option<Array2<f64>>,
}

pub fn forward(
    features: ArrayView2<'_, f64>,
    params: &HeadParameters,
    anchors: &AnchorSet,
) -> Result<(HeadOutput, HeadCache)> {
    check_len("head anchors", anchors.count(), features.nrows())?;
    check_len("head channels", params.channels(), features.ncols())?;
    check_len("head stations", anchors.station_count(), params.layout.stations)?;
    let (hidden_pre, hidden_act, raw) = match &params.hidden {
        Some(h) => {
            let pre = h.apply(features);
            let act = pre.mapv(|v| v.max(0.0));
            let raw = params.output.apply(act.view());
            (Some(pre), Some(act), raw)
        }
        None => (None, None, params.output.apply(features)),
    };
    Ok((
        HeadOutput {
            raw,
            layout: params.layout,
        },
        HeadCache {
            input: features.to_owned(),
            hidden_pre,
            hidden_act,
        },
    ))
}

/// Gradients of the heads and of the input features given the gradient
/// of the objective with respect to the raw outputs.
pub fn backward(
    cache: &HeadCache,
    d_raw: &Array2<f64>,
    params: &HeadParameters,
) -> (HeadParameters, Array2<f64>) {
    let mut grads = HeadParameters::zeros(params.channels(), params.layout, params.hidden.is_some());
    let last_input = cache.hidden_act.as_ref().unwrap_or(&cache.input);
    grads.output.weight = d_raw.t().dot(last_input);
    grads.output.bias = d_raw.sum_axis(Axis(0));
    let d_last = d_raw.dot(&params.output.weight);
    let d_features = match (&params.hidden, &cache.hidden_pre) {
        (Some(h), Some(pre)) => {
            let d_pre = d_last * &pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let g = grads.hidden.as_mut().expect("hidden grads allocated");
            g.weight = d_pre.t().dot(&cache.input);
            g.bias = d_pre.sum_axis(Axis(0));
            d_pre.dot(&h.weight)
        }
        _ => d_last,
    };
    (grads, d_features)
}

/// Training role of one anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorTarget {
    /// Regresses onto ground-truth lane `index`.
    Positive(usize),
    /// Close to a lane but not chosen; excluded from every loss.
    Ignore,
    Background,
}

/// Mean lateral distance between `lane` and anchor `k` over the anchor
/// stations the lane spans, restricted to visible points when it has any.
pub fn mean_lateral_distance(anchors: &AnchorSet, k: usize, lane: &Lane3D) -> Option<f64> {
    let st = anchors.stations();
    let (first, last) = (lane.stations()[0], *lane.stations().last().unwrap());
    let idx: Vec<usize> = (0..st.len()).filter(|&j| st[j] >= first && st[j] <= last).collect();
    if idx.is_empty() {
        return None;
    }
    let targets: Vec<f64> = idx.iter().map(|&j| st[j]).collect();
    let resampled = if lane.len() == 1 {
        lane.clone()
    } else {
        resample_lane(lane, &targets).ok()?
    };
    let base = anchors.base_lateral(k);
    let pairs: Vec<(f64, bool)> = idx
        .iter()
        .enumerate()
        .map(|(r, &j)| {
            (
                (resampled.lateral()[r] - base[j]).abs(),
                resampled.visibility()[r] >= 0.5,
            )
        })
        .collect();
    let visible: Vec<f64> = pairs.iter().filter(|p| p.1).map(|p| p.0).collect();
    let used: Vec<f64> = if visible.is_empty() {
        pairs.iter().map(|p| p.0).collect()
    } else {
        visible
    };
    Some(used.iter().sum::<f64>() / used.len() as f64)
}

const UNREACHABLE: f64 = 1e12;

/// One anchor per ground-truth lane by global minimum mean lateral
/// distance; other anchors within `positive_threshold` of any lane are
/// ignored, the rest are background.
pub fn assign_targets(
    anchors: &AnchorSet,
    gts: &[Lane3D],
    positive_threshold: f64,
) -> Result<Vec<AnchorTarget>> {
    if !(positive_threshold > 0.0) {
        return Err(Error::config("positive_threshold", "must be positive"));
    }
    let k = anchors.count();
    let mut targets = vec![AnchorTarget::Background; k];
    if gts.is_empty() {
        return Ok(targets);
    }
    let dist: Vec<Vec<f64>> = gts
        .iter()
        .map(|g| {
            (0..k)
                .map(|a| mean_lateral_distance(anchors, a, g).unwrap_or(UNREACHABLE))
                .collect()
        })
        .collect();
    for (gi, a) in min_cost_pairs(&dist) {
        if dist[gi][a] < UNREACHABLE {
            targets[a] = AnchorTarget::Positive(gi);
        }
    }
    for a in 0..k {
        if targets[a] == AnchorTarget::Background
            && dist.iter().any(|row| row[a] <= positive_threshold)
        {
            targets[a] = AnchorTarget::Ignore;
        }
    }
    Ok(targets)
}
