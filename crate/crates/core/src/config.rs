//! The run configuration document and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{build_default_anchors, AnchorLayout, AnchorSet};
use crate::heads::HeadLayout;
use crate::losses::LossConfig;
use crate::metrics::EvalConfig;
use crate::model::ModelConfig;
use crate::synth::SceneConfig;
use crate::train::{TrainConfig, TrainSetup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_scenes: 64,
            eval_scenes: 32,
        }
    }
}

/// Everything a run depends on besides the code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfiguration {
    pub seed: u64,
    pub scene: SceneConfig,
    pub anchors: AnchorLayout,
    pub dataset: DatasetConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub out: PathBuf,
}

impl Default for RunConfiguration {
    fn default() -> Self {
        Self {
            seed: 7,
            scene: SceneConfig::default(),
            anchors: AnchorLayout::default(),
            dataset: DatasetConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfiguration {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Build the anchors and check every section.
    pub fn validate(&self) -> Result<AnchorSet> {
        let anchors = build_default_anchors(&self.anchors)?;
        self.scene.validate(&anchors)?;
        self.loss.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        Ok(anchors)
    }

    /// First 16 hex digits of SHA-256 over the compact JSON form, with the
    /// output directory left out so relocated runs keep their hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let json = serde_json::to_string(&c).expect("configuration serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn head_layout(&self, anchors: &AnchorSet) -> HeadLayout {
        HeadLayout {
            stations: anchors.station_count(),
            classes: self.scene.classes(),
        }
    }

    pub fn train_setup<'a>(&'a self, anchors: &'a AnchorSet) -> TrainSetup<'a> {
        TrainSetup {
            train: &self.train,
            model: &self.model,
            loss: &self.loss,
            anchors,
            layout: self.head_layout(anchors),
            channels: self.scene.channels,
            clip_len: self.scene.clip_len,
            seed: self.seed,
        }
    }
}
