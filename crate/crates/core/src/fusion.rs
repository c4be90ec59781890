//! Per-anchor LSTM temporal fusion.
//!
//! For every anchor the features of the last `T` frames run through one
//! LSTM shared by all anchors, starting from zero state; the final hidden
//! state is projected back to feature width and passed through a ReLU:
//! `fused = relu(W h_T + b)`. All anchors are evaluated together as the
//! rows of a `K x C` matrix per frame.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::diff::sigmoid;
use crate::error::{check_len, Error, Result};

/// LSTM weights with gate blocks stacked in the order input, forget,
/// cell candidate, output, plus the fusion projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParameters {
    /// `4H x C`
    pub input_weights: Array2<f64>,
    /// `4H x H`
    pub hidden_weights: Array2<f64>,
    /// `4H`
    pub bias: Array1<f64>,
    /// `C x H`
    pub projection: Array2<f64>,
    /// `C`
    pub projection_bias: Array1<f64>,
}

impl LstmParameters {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            input_weights: Array2::zeros((4 * hidden, channels)),
            hidden_weights: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
            projection: Array2::zeros((channels, hidden)),
            projection_bias: Array1::zeros(channels),
        }
    }

    /// Uniform in `[-1/sqrt(H), 1/sqrt(H)]`, forget-gate bias `+1`,
    /// projection bias zero.
    pub fn init<R: Rng>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut p = Self::zeros(channels, hidden);
        for a in [&mut p.input_weights, &mut p.hidden_weights, &mut p.projection] {
            a.iter_mut().for_each(|w| *w = dist.sample(rng));
        }
        p.bias.iter_mut().for_each(|w| *w = dist.sample(rng));
        p.bias.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        p
    }

    pub fn channels(&self) -> usize {
        self.input_weights.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.hidden_weights.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h) = (self.channels(), self.hidden());
        check_len("lstm input weights rows", 4 * h, self.input_weights.nrows())?;
        check_len("lstm hidden weights rows", 4 * h, self.hidden_weights.nrows())?;
        check_len("lstm bias", 4 * h, self.bias.len())?;
        check_len("projection rows", c, self.projection.nrows())?;
        check_len("projection cols", h, self.projection.ncols())?;
        check_len("projection bias", c, self.projection_bias.len())?;
        if self.slices().iter().any(|(_, s)| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::domain("lstm", "non-finite parameter"));
        }
        Ok(())
    }

    pub fn slices(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("lstm.input_weights", self.input_weights.as_slice().unwrap()),
            ("lstm.hidden_weights", self.hidden_weights.as_slice().unwrap()),
            ("lstm.bias", self.bias.as_slice().unwrap()),
            ("lstm.projection", self.projection.as_slice().unwrap()),
            ("lstm.projection_bias", self.projection_bias.as_slice().unwrap()),
        ]
    }

    pub fn slices_mut(&mut self) -> [(&'static str, &mut [f64]); 5] {
        [
            ("lstm.input_weights", self.input_weights.as_slice_mut().unwrap()),
            ("lstm.hidden_weights", self.hidden_weights.as_slice_mut().unwrap()),
            ("lstm.bias", self.bias.as_slice_mut().unwrap()),
            ("lstm.projection", self.projection.as_slice_mut().unwrap()),
            ("lstm.projection_bias", self.projection_bias.as_slice_mut().unwrap()),
        ]
    }
}

/// Features of one anchor over `T` frames, oldest first (`T x C`).
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalFeatureSequence {
    features: Array2<f64>,
}

impl TemporalFeatureSequence {
    pub fn new(features: Array2<f64>) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::Empty("feature sequence needs T >= 1 and C >= 1"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("feature sequence", "non-finite feature"));
        }
        Ok(Self { features })
    }

    pub fn frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }
}

struct StepCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// activated gates `K x 4H`
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
}

/// Forward record needed by [`fuse_backward`].
pub struct FusionCache {
    steps: Vec<StepCache>,
    h_last: Array2<f64>,
    projected: Array2<f64>,
}

fn step_batch(
    x: ArrayView2<'_, f64>,
    h_prev: &Array2<f64>,
    c_prev: &Array2<f64>,
    p: &LstmParameters,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
    let h = p.hidden();
    let mut gates = x.dot(&p.input_weights.t()) + h_prev.dot(&p.hidden_weights.t());
    gates += &p.bias;
    for (col, mut lane) in gates.axis_iter_mut(Axis(1)).enumerate() {
        if (2 * h..3 * h).contains(&col) {
            lane.mapv_inplace(f64::tanh);
        } else {
            lane.mapv_inplace(sigmoid);
        }
    }
    let i = gates.slice(s![.., 0..h]);
    let f = gates.slice(s![.., h..2 * h]);
    let g = gates.slice(s![.., 2 * h..3 * h]);
    let o = gates.slice(s![.., 3 * h..4 * h]);
    let c = &f * c_prev + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h_new = &o * &tanh_c;
    (h_new, c, gates, tanh_c)
}

/// One LSTM cell update for a single input vector.
pub fn lstm_step(
    x: ArrayView1<'_, f64>,
    h_prev: ArrayView1<'_, f64>,
    c_prev: ArrayView1<'_, f64>,
    params: &LstmParameters,
) -> Result<(Array1<f64>, Array1<f64>)> {
    check_len("lstm input", params.channels(), x.len())?;
    check_len("lstm hidden state", params.hidden(), h_prev.len())?;
    check_len("lstm cell state", params.hidden(), c_prev.len())?;
    let row = |v: ArrayView1<'_, f64>| v.to_owned().insert_axis(Axis(0));
    let (h, c, _, _) = step_batch(row(x).view(), &row(h_prev), &row(c_prev), params);
    Ok((h.row(0).to_owned(), c.row(0).to_owned()))
}

/// Fuse `frames` (each `K x C`, oldest first) into `K x C` features.
pub fn fuse_frames(
    frames: &[ArrayView2<'_, f64>],
    params: &LstmParameters,
) -> Result<(Array2<f64>, FusionCache)> {
    let first = frames.first().ok_or(Error::Empty("fusion needs at least one frame"))?;
    let k = first.nrows();
    for f in frames {
        check_len("fusion frame anchors", k, f.nrows())?;
        check_len("fusion frame channels", params.channels(), f.ncols())?;
    }
    let hsz = params.hidden();
    let mut h = Array2::zeros((k, hsz));
    let mut c = Array2::zeros((k, hsz));
    let mut steps = Vec::with_capacity(frames.len());
    for x in frames {
        let (h_new, c_new, gates, tanh_c) = step_batch(x.view(), &h, &c, params);
        steps.push(StepCache {
            x: x.to_owned(),
            h_prev: h,
            c_prev: c,
            gates,
            tanh_c,
        });
        h = h_new;
        c = c_new;
    }
    let mut projected = h.dot(&params.projection.t());
    projected += &params.projection_bias;
    let fused = projected.mapv(|v| v.max(0.0));
    Ok((
        fused,
        FusionCache {
            steps,
            h_last: h,
            projected,
        },
    ))
}

/// Backpropagation through time. `d_fused` is the gradient of the scalar
/// objective with respect to the fused features.
pub fn fuse_backward(
    cache: &FusionCache,
    d_fused: &Array2<f64>,
    params: &LstmParameters,
) -> LstmParameters {
    let hsz = params.hidden();
    let mut grads = LstmParameters::zeros(params.channels(), hsz);
    // relu'(0) = 0
    let d_proj = d_fused * &cache.projected.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    grads.projection = d_proj.t().dot(&cache.h_last);
    grads.projection_bias = d_proj.sum_axis(Axis(0));
    let mut dh = d_proj.dot(&params.projection);
    let mut dc: Array2<f64> = Array2::zeros(dh.raw_dim());
    let mut dz = Array2::zeros((dh.nrows(), 4 * hsz));

    for step in cache.steps.iter().rev() {
        let i = step.gates.slice(s![.., 0..hsz]);
        let f = step.gates.slice(s![.., hsz..2 * hsz]);
        let g = step.gates.slice(s![.., 2 * hsz..3 * hsz]);
        let o = step.gates.slice(s![.., 3 * hsz..4 * hsz]);
        dc = dc + &dh * &o * &step.tanh_c.mapv(|t| 1.0 - t * t);
        let d_o = &dh * &step.tanh_c;
        let d_i = &dc * &g;
        let d_g = &dc * &i;
        let d_f = &dc * &step.c_prev;
        dz.slice_mut(s![.., 0..hsz])
            .assign(&(&d_i * &i.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![.., hsz..2 * hsz])
            .assign(&(&d_f * &f.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![.., 2 * hsz..3 * hsz])
            .assign(&(&d_g * &g.mapv(|v| 1.0 - v * v)));
        dz.slice_mut(s![.., 3 * hsz..4 * hsz])
            .assign(&(&d_o * &o.mapv(|v| v * (1.0 - v))));
        grads.input_weights += &dz.t().dot(&step.x);
        grads.hidden_weights += &dz.t().dot(&step.h_prev);
        grads.bias += &dz.sum_axis(Axis(0));
        dh = dz.dot(&params.hidden_weights);
        dc *= &f;
    }
    grads
}

/// `relu(W h_T + b)` for one anchor's sequence, zero initial state.
pub fn fuse_sequence(seq: &TemporalFeatureSequence, params: &LstmParameters) -> Result<Array1<f64>> {
    let frames: Vec<_> = seq
        .features
        .rows()
        .into_iter()
        .map(|r| r.insert_axis(Axis(0)))
        .collect();
    let (fused, _) = fuse_frames(&frames, params)?;
    Ok(fused.row(0).to_owned())
}

/// [`fuse_sequence`] for every anchor with shared parameters; returns a
/// `K x C` matrix in anchor order.
pub fn fuse_all_anchors(
    batch: &[TemporalFeatureSequence],
    params: &LstmParameters,
) -> Result<Array2<f64>> {
    let first = batch.first().ok_or(Error::Empty("no anchor sequences"))?;
    let (t, c) = (first.frames(), first.channels());
    for seq in batch {
        check_len("anchor sequence frames", t, seq.frames())?;
        check_len("anchor sequence channels", c, seq.channels())?;
    }
    let frames: Vec<Array2<f64>> = (0..t)
        .map(|ti| {
            let mut m = Array2::zeros((batch.len(), c));
            for (k, seq) in batch.iter().enumerate() {
                m.row_mut(k).assign(&seq.features.row(ti));
            }
            m
        })
        .collect();
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    Ok(fuse_frames(&views, params)?.0)
}
