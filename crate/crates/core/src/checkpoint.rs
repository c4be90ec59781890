//! Checkpoint files.
//!
//! Layout: one line of JSON (the header), a `\n`, then every parameter as a
//! little-endian `f64`, block by block in the order listed in the header's
//! `blocks` field:
//!
//! 1. `heads.hidden.weight` (`C x C`, row-major) and `heads.hidden.bias`,
//!    when the heads have a hidden layer;
//! 2. `heads.output.weight` (`(3S + N) x C`) and `heads.output.bias`;
//! 3. `lstm.input_weights` (`4H x C`), `lstm.hidden_weights` (`4H x H`),
//!    `lstm.bias` (`4H`), `lstm.projection` (`C x H`),
//!    `lstm.projection_bias` (`C`), gate order input, forget, cell, output;
//! 4. `log_variance.<task>` for regression, curve, classification,
//!    visibility.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadLayout;
use crate::model::{Model, ModelConfig};
use crate::train::EpochMetrics;

pub const FORMAT: &str = "lanefuse-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config_hash: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub channels: usize,
    pub stations: usize,
    pub classes: usize,
    pub lstm_hidden: usize,
    pub head_hidden: bool,
    pub fusion: bool,
    pub blocks: Vec<BlockInfo>,
    pub metrics: Option<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, config_hash: String, epoch: usize, metrics: Option<EpochMetrics>) -> Self {
        let layout = model.layout();
        let header = CheckpointHeader {
            format: FORMAT.into(),
            config_hash,
            epoch,
            channels: model.channels(),
            stations: layout.stations,
            classes: layout.classes,
            lstm_hidden: model.lstm.hidden(),
            head_hidden: model.heads.hidden.is_some(),
            fusion: model.fusion,
            blocks: model
                .blocks()
                .into_iter()
                .map(|(name, b)| BlockInfo { name, len: b.len() })
                .collect(),
            metrics,
        };
        Self { header, model }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header serializes");
        out.push(b'\n');
        for v in self.model.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", header.format)));
        }
        let mut model = Model::init(
            &ModelConfig {
                lstm_hidden: header.lstm_hidden,
                head_hidden: header.head_hidden,
            },
            header.channels,
            HeadLayout {
                stations: header.stations,
                classes: header.classes,
            },
            header.fusion,
            0,
        );
        let expected: Vec<BlockInfo> = model
            .blocks()
            .into_iter()
            .map(|(name, b)| BlockInfo { name, len: b.len() })
            .collect();
        if expected != header.blocks {
            return Err(Error::Checkpoint("block list does not match the declared shapes".into()));
        }
        let body = &bytes[nl + 1..];
        let n = model.parameter_count();
        if body.len() != 8 * n {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                8 * n,
                body.len()
            )));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model.assign(&flat)?;
        Ok(Self { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_default_anchors, AnchorLayout};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reload_gives_bitwise_identical_outputs() {
        let anchors = build_default_anchors(&AnchorLayout {
            count: 6,
            lateral_span: [-5.0, 5.0],
            stations: vec![3.0, 10.0, 20.0, 40.0],
        })
        .unwrap();
        let layout = HeadLayout {
            stations: 4,
            classes: 3,
        };
        for fusion in [true, false] {
            let mut model = Model::init(&ModelConfig { lstm_hidden: 5, head_hidden: true }, 16, layout, fusion, 11);
            model.uncertainty.log_variances.insert(crate::losses::Task::Curve, 0.125);
            let ck = Checkpoint::new(model.clone(), "abc".into(), 3, None);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.ckpt");
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back, ck);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let frames: Vec<Array2<f64>> = (0..3)
                .map(|_| Array2::from_shape_simple_fn((6, 16), || rng.random_range(-1.0..1.0)))
                .collect();
            let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
            let a = model.predict(&anchors, &views).unwrap();
            let b = back.model.predict(&anchors, &views).unwrap();
            let bits = |x: &Array2<f64>| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.raw), bits(&b.raw));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let layout = HeadLayout {
            stations: 2,
            classes: 2,
        };
        let model = Model::init(&ModelConfig { lstm_hidden: 2, head_hidden: false }, 8, layout, true, 1);
        let bytes = Checkpoint::new(model, "h".into(), 0, None).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"not json\n").is_err());
        assert!(Checkpoint::from_bytes(b"").is_err());
    }
}
