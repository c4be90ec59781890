//! Learnable state (heads, LSTM, task log-variances) and inference.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fusion::{fuse_frames, FusionCache, LstmParameters};
use crate::geometry::{decode_anchor, AnchorSet, Lane3D};
use crate::heads::{forward, HeadCache, HeadLayout, HeadOutput, HeadParameters, BACKGROUND};
use crate::losses::{Task, UncertaintyState};
use crate::metrics::{
    match_lanes, mean_jitter, temporal_smoothness, EvalConfig, MatchReport, SceneMetrics,
};
use crate::synth::SceneSequence;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub lstm_hidden: usize,
    /// Put a shared ReLU layer of width `C` in front of the heads.
    pub head_hidden: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lstm_hidden: 64,
            head_hidden: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lstm_hidden < 1 {
            return Err(Error::config("model.lstm_hidden", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub heads: HeadParameters,
    /// Always present so every configuration shares one parameter layout;
    /// unused when `fusion` is off.
    pub lstm: LstmParameters,
    pub uncertainty: UncertaintyState,
    pub fusion: bool,
}

/// Forward record for [`Model::backward`](crate::train).
pub struct ForwardCache {
    pub(crate) fusion: Option<FusionCache>,
    pub(crate) heads: HeadCache,
}

impl Model {
    pub fn init(
        config: &ModelConfig,
        channels: usize,
        layout: HeadLayout,
        fusion: bool,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = HeadParameters::init(channels, layout, config.head_hidden, &mut rng);
        let lstm = LstmParameters::init(channels, config.lstm_hidden, &mut rng);
        Self {
            heads,
            lstm,
            uncertainty: UncertaintyState::default(),
            fusion,
        }
    }

    /// Same shapes, all zeros; used to accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        Self {
            heads: HeadParameters::zeros(
                self.heads.channels(),
                self.heads.layout(),
                self.heads.hidden.is_some(),
            ),
            lstm: LstmParameters::zeros(self.lstm.channels(), self.lstm.hidden()),
            uncertainty: UncertaintyState::zeros(&Task::ALL),
            fusion: self.fusion,
        }
    }

    pub fn channels(&self) -> usize {
        self.heads.channels()
    }

    pub fn layout(&self) -> HeadLayout {
        self.heads.layout()
    }

    /// Named parameter blocks in checkpoint order: heads, LSTM, then one
    /// log-variance per task.
    pub fn blocks(&self) -> Vec<(String, Vec<f64>)> {
        let mut v: Vec<(String, Vec<f64>)> = self
            .heads
            .slices()
            .into_iter()
            .chain(self.lstm.slices())
            .map(|(n, s)| (n.to_string(), s.to_vec()))
            .collect();
        for t in Task::ALL {
            v.push((format!("log_variance.{t}"), vec![self.uncertainty.get(t)]));
        }
        v
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().into_iter().flat_map(|(_, b)| b).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Overwrite every parameter from a flat vector in [`Model::blocks`]
    /// order.
    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameters", self.parameter_count(), flat.len())?;
        let mut at = 0;
        for (_, s) in self
            .heads
            .slices_mut()
            .into_iter()
            .chain(self.lstm.slices_mut())
        {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        }
        for t in Task::ALL {
            self.uncertainty.log_variances.insert(t, flat[at]);
            at += 1;
        }
        Ok(())
    }

    /// Per-anchor features fed to the heads: the LSTM summary of `window`
    /// (oldest first) or, without fusion, its last frame.
    pub fn features(
        &self,
        window: &[ArrayView2<'_, f64>],
    ) -> Result<(Array2<f64>, Option<FusionCache>)> {
        let last = window.last().ok_or(Error::Empty("empty frame window"))?;
        if self.fusion {
            let (f, c) = fuse_frames(window, &self.lstm)?;
            Ok((f, Some(c)))
        } else {
            Ok((last.to_owned(), None))
        }
    }

    pub fn forward(
        &self,
        anchors: &AnchorSet,
        window: &[ArrayView2<'_, f64>],
    ) -> Result<(HeadOutput, ForwardCache)> {
        let (features, fusion) = self.features(window)?;
        let (out, heads) = forward(features.view(), &self.heads, anchors)?;
        Ok((out, ForwardCache { fusion, heads }))
    }

    pub fn predict(&self, anchors: &AnchorSet, window: &[ArrayView2<'_, f64>]) -> Result<HeadOutput> {
        Ok(self.forward(anchors, window)?.0)
    }
}

fn softmax_background(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - m).exp()).sum();
    (logits[BACKGROUND] - m).exp() / sum
}

/// Lanes from head outputs: every anchor whose arg-max class is not
/// background, visibility binarised at the configured threshold, then
/// non-maximum suppression by lane confidence.
pub fn detect(anchors: &AnchorSet, output: &HeadOutput, config: &EvalConfig) -> Result<Vec<Lane3D>> {
    let mut found = Vec::new();
    for pred in output.predictions() {
        let decoded = decode_anchor(anchors, &pred, config.visibility_threshold)?;
        if decoded.lane.category() == BACKGROUND {
            continue;
        }
        let vis: Vec<f64> = decoded
            .above_threshold
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        let l = &decoded.lane;
        let lane = Lane3D::new(
            l.stations().to_vec(),
            l.lateral().to_vec(),
            l.height().to_vec(),
            vis,
            l.category(),
        )?;
        found.push((1.0 - softmax_background(&pred.class_logits), lane));
    }
    // Stable: equal scores keep anchor order.
    found.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut kept: Vec<Lane3D> = Vec::new();
    for (_, lane) in found {
        let suppressed = kept.iter().any(|k| {
            let gaps: Vec<f64> = (0..lane.len())
                .filter(|&j| lane.visibility()[j] > 0.5 && k.visibility()[j] > 0.5)
                .map(|j| (lane.lateral()[j] - k.lateral()[j]).abs())
                .collect();
            !gaps.is_empty() && gaps.iter().sum::<f64>() / (gaps.len() as f64) < config.nms_distance
        });
        if !suppressed {
            kept.push(lane);
        }
    }
    Ok(kept)
}

/// Frame windows of length `clip_len` ending at each frame from
/// `clip_len - 1` on.
pub fn windows(scene: &SceneSequence, clip_len: usize) -> Result<Vec<Vec<ArrayView2<'_, f64>>>> {
    if clip_len < 1 || scene.len() < clip_len {
        return Err(Error::config(
            "scene.clip_len",
            format!("scene has {} frames, clip needs {clip_len}", scene.len()),
        ));
    }
    Ok((clip_len - 1..scene.len())
        .map(|e| {
            scene.frames[e + 1 - clip_len..=e]
                .iter()
                .map(|f| f.features.view())
                .collect()
        })
        .collect())
}

/// Detected lanes for every window end frame of `scene`.
pub fn predict_scene(
    model: &Model,
    anchors: &AnchorSet,
    scene: &SceneSequence,
    clip_len: usize,
    config: &EvalConfig,
) -> Result<Vec<Vec<Lane3D>>> {
    windows(scene, clip_len)?
        .iter()
        .map(|w| detect(anchors, &model.predict(anchors, w)?, config))
        .collect()
}

/// Metrics for one scene given predictions for the frames
/// `clip_len - 1 ..`: matching on the last frame, jitter across all of
/// them.
pub fn score_scene(
    scene_id: String,
    scene: &SceneSequence,
    predictions: &[Vec<Lane3D>],
    clip_len: usize,
    config: &EvalConfig,
) -> Result<SceneMetrics> {
    let first = clip_len.saturating_sub(1);
    check_len("predicted frames", scene.len() - first, predictions.len())?;
    let last = predictions.last().ok_or(Error::Empty("no predicted frames"))?;
    let report = match_lanes(last, &scene.last().lanes, config.threshold, config.coverage)?;
    let jitter = if predictions.len() >= 2 {
        temporal_smoothness(
            predictions,
            &scene.ego_motion[first..],
            config.threshold,
            config.coverage,
        )
        .ok()
    } else {
        None
    };
    Ok(SceneMetrics {
        scene_id,
        report,
        jitter,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenes: Vec<SceneMetrics>,
    pub overall: SceneMetrics,
}

impl EvalSummary {
    pub fn from_rows(scenes: Vec<SceneMetrics>) -> Self {
        let reports: Vec<MatchReport> = scenes.iter().map(|s| s.report.clone()).collect();
        let overall = SceneMetrics {
            scene_id: "all".into(),
            report: MatchReport::aggregate(&reports),
            jitter: mean_jitter(&scenes),
        };
        Self { scenes, overall }
    }
}

pub fn scene_id(index: usize) -> String {
    crate::synth::scene_dir_name(index)
}

pub fn evaluate_model(
    model: &Model,
    anchors: &AnchorSet,
    scenes: &[SceneSequence],
    clip_len: usize,
    config: &EvalConfig,
) -> Result<EvalSummary> {
    config.validate()?;
    let rows = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let preds = predict_scene(model, anchors, s, clip_len, config)?;
            score_scene(scene_id(i), s, &preds, clip_len, config)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_default_anchors, AnchorLayout};
    use crate::heads::{HeadLayout, HeadOutput};

    fn anchors() -> AnchorSet {
        build_default_anchors(&AnchorLayout {
            count: 9,
            lateral_span: [-4.0, 4.0],
            stations: vec![5.0, 15.0, 25.0],
        })
        .unwrap()
    }

    #[test]
    fn flatten_assign_round_trip() {
        let layout = HeadLayout {
            stations: 3,
            classes: 3,
        };
        let m = Model::init(&ModelConfig::default(), 12, layout, true, 4);
        let flat = m.flatten();
        let mut z = m.zeros_like();
        z.assign(&flat).unwrap();
        assert_eq!(z.flatten(), flat);
        assert_eq!(z, m);
        assert!(z.assign(&flat[1..]).is_err());
    }

    #[test]
    fn detection_skips_background_and_suppresses_neighbours() {
        let a = anchors();
        let layout = HeadLayout {
            stations: 3,
            classes: 3,
        };
        let mut raw = Array2::zeros((9, layout.width()));
        for k in 0..9 {
            raw[[k, 9]] = 5.0; // background
            for j in 0..3 {
                raw[[k, 6 + j]] = 4.0; // visible
            }
        }
        // Anchors 2 and 3 (1 m apart) both fire on the same lane.
        raw[[2, 9]] = 0.0;
        raw[[2, 10]] = 3.0;
        raw[[3, 9]] = 0.0;
        raw[[3, 10]] = 6.0;
        raw[[7, 9]] = 0.0;
        raw[[7, 11]] = 2.0;
        let out = HeadOutput { raw, layout };
        let lanes = detect(&a, &out, &EvalConfig::default()).unwrap();
        assert_eq!(lanes.len(), 2);
        assert_eq!(lanes[0].lateral()[0], -1.0);
        assert_eq!(lanes[0].category(), 1);
        assert_eq!(lanes[1].category(), 2);
        let no_nms = EvalConfig {
            nms_distance: 0.0,
            ..EvalConfig::default()
        };
        assert_eq!(detect(&a, &out, &no_nms).unwrap().len(), 3);
    }
}
