//! Lanes, anchors and anchor decoding.
//!
//! Everything lives in the ego frame: `y` forward (the longitudinal
//! stations), `x` lateral, `z` up, all in meters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::sigmoid;
use crate::error::{check_len, Error, Result};

/// Default visibility threshold applied when decoding.
pub const DEFAULT_VISIBILITY_THRESHOLD: f64 = 0.5;

/// A lane sampled at strictly increasing longitudinal stations.
///
/// Serialized with the lane-file field names `stations`, `x`, `z`,
/// `visibility` and `category`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LaneRecord", into = "LaneRecord")]
pub struct Lane3D {
    stations: Vec<f64>,
    lateral: Vec<f64>,
    height: Vec<f64>,
    visibility: Vec<f64>,
    category: usize,
}

#[derive(Serialize, Deserialize)]
struct LaneRecord {
    stations: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    visibility: Vec<f64>,
    category: usize,
}

impl TryFrom<LaneRecord> for Lane3D {
    type Error = Error;
    fn try_from(r: LaneRecord) -> Result<Self> {
        Lane3D::new(r.stations, r.x, r.z, r.visibility, r.category)
    }
}

impl From<Lane3D> for LaneRecord {
    fn from(l: Lane3D) -> Self {
        LaneRecord {
            stations: l.stations,
            x: l.lateral,
            z: l.height,
            visibility: l.visibility,
            category: l.category,
        }
    }
}

pub(crate) fn check_stations(field: &str, stations: &[f64]) -> Result<()> {
    if stations.iter().any(|s| !s.is_finite()) {
        return Err(Error::config(field, "stations must be finite"));
    }
    if stations.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config(field, "stations must be strictly increasing"));
    }
    Ok(())
}

impl Lane3D {
    pub fn new(
        stations: Vec<f64>,
        lateral: Vec<f64>,
        height: Vec<f64>,
        visibility: Vec<f64>,
        category: usize,
    ) -> Result<Self> {
        if stations.is_empty() {
            return Err(Error::Empty("lane stations"));
        }
        check_stations("stations", &stations)?;
        check_len("lane x", stations.len(), lateral.len())?;
        check_len("lane z", stations.len(), height.len())?;
        check_len("lane visibility", stations.len(), visibility.len())?;
        if lateral.iter().chain(&height).any(|v| !v.is_finite()) {
            return Err(Error::config("x/z", "lane coordinates must be finite"));
        }
        if visibility.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("visibility", "values must lie in [0, 1]"));
        }
        Ok(Self {
            stations,
            lateral,
            height,
            visibility,
            category,
        })
    }

    pub fn stations(&self) -> &[f64] {
        &self.stations
    }

    pub fn lateral(&self) -> &[f64] {
        &self.lateral
    }

    pub fn height(&self) -> &[f64] {
        &self.height
    }

    pub fn visibility(&self) -> &[f64] {
        &self.visibility
    }

    pub fn category(&self) -> usize {
        self.category
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn is_visible(&self, j: usize, threshold: f64) -> bool {
        self.visibility[j] >= threshold
    }

    pub fn point(&self, j: usize) -> [f64; 3] {
        [self.lateral[j], self.stations[j], self.height[j]]
    }

    pub fn points(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        (0..self.len()).map(|j| self.point(j))
    }

    pub fn with_category(mut self, category: usize) -> Self {
        self.category = category;
        self
    }
}

/// Layout of the straight default anchors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorLayout {
    pub count: usize,
    pub lateral_span: [f64; 2],
    pub stations: Vec<f64>,
}

impl Default for AnchorLayout {
    fn default() -> Self {
        let stations = (0..20).map(|j| 3.0 + 100.0 * j as f64 / 19.0).collect();
        Self {
            count: 40,
            lateral_span: [-10.0, 10.0],
            stations,
        }
    }
}

impl AnchorLayout {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::config("anchors.count", "need at least one anchor"));
        }
        let [lo, hi] = self.lateral_span;
        if !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(Error::config("anchors.lateral_span", "must be a finite [low, high] pair"));
        }
        if self.stations.is_empty() {
            return Err(Error::config("anchors.stations", "must not be empty"));
        }
        check_stations("anchors.stations", &self.stations)
    }
}

/// Fixed family of anchors sharing one station list.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    stations: Vec<f64>,
    base_lateral: Vec<Vec<f64>>,
    base_height: Vec<Vec<f64>>,
}

impl AnchorSet {
    pub fn new(
        stations: Vec<f64>,
        base_lateral: Vec<Vec<f64>>,
        base_height: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if base_lateral.is_empty() {
            return Err(Error::config("anchors.count", "need at least one anchor"));
        }
        check_stations("anchors.stations", &stations)?;
        check_len("anchor heights", base_lateral.len(), base_height.len())?;
        for (x, z) in base_lateral.iter().zip(&base_height) {
            check_len("anchor lateral", stations.len(), x.len())?;
            check_len("anchor height", stations.len(), z.len())?;
            if x.iter().chain(z).any(|v| !v.is_finite()) {
                return Err(Error::config("anchors", "base geometry must be finite"));
            }
        }
        Ok(Self {
            stations,
            base_lateral,
            base_height,
        })
    }

    pub fn count(&self) -> usize {
        self.base_lateral.len()
    }

    pub fn station_count(&self) -> usize {
        self.stations.len()
    }

    pub fn stations(&self) -> &[f64] {
        &self.stations
    }

    pub fn base_lateral(&self, k: usize) -> &[f64] {
        &self.base_lateral[k]
    }

    pub fn base_height(&self, k: usize) -> &[f64] {
        &self.base_height[k]
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k < self.count() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                what: "anchor",
                index: k,
                len: self.count(),
            })
        }
    }

    /// Offsets `(x - x_a, z - z_a)` of `lane` from anchor `k`. The lane must
    /// be sampled on the anchor stations.
    pub fn encode(&self, k: usize, lane: &Lane3D) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_index(k)?;
        check_len("encode stations", self.station_count(), lane.len())?;
        let dx = lane
            .lateral()
            .iter()
            .zip(&self.base_lateral[k])
            .map(|(x, a)| x - a)
            .collect();
        let dz = lane
            .height()
            .iter()
            .zip(&self.base_height[k])
            .map(|(z, a)| z - a)
            .collect();
        Ok((dx, dz))
    }
}

/// Straight, axis-parallel anchors evenly spaced across the lateral span,
/// height zero.
pub fn build_default_anchors(layout: &AnchorLayout) -> Result<AnchorSet> {
    layout.validate()?;
    let [lo, hi] = layout.lateral_span;
    let n = layout.count;
    let s = layout.stations.len();
    let base_lateral = (0..n)
        .map(|k| {
            let x = if n == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * k as f64 / (n - 1) as f64
            };
            vec![x; s]
        })
        .collect();
    AnchorSet::new(layout.stations.clone(), base_lateral, vec![vec![0.0; s]; n])
}

/// Raw per-anchor head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorPrediction {
    pub anchor: usize,
    pub dx: Vec<f64>,
    pub dz: Vec<f64>,
    pub visibility_logits: Vec<f64>,
    pub class_logits: Vec<f64>,
}

/// A decoded lane plus the per-station flag of whether its visibility
/// cleared the decoding threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedLane {
    pub anchor: usize,
    pub lane: Lane3D,
    pub above_threshold: Vec<bool>,
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn decode_anchor(
    anchors: &AnchorSet,
    pred: &AnchorPrediction,
    visibility_threshold: f64,
) -> Result<DecodedLane> {
    anchors.check_index(pred.anchor)?;
    if !(0.0..=1.0).contains(&visibility_threshold) {
        return Err(Error::config("visibility_threshold", "must lie in [0, 1]"));
    }
    let s = anchors.station_count();
    check_len("decode dx", s, pred.dx.len())?;
    check_len("decode dz", s, pred.dz.len())?;
    check_len("decode visibility", s, pred.visibility_logits.len())?;
    if pred.class_logits.is_empty() {
        return Err(Error::Empty("class logits"));
    }
    let k = pred.anchor;
    let x = anchors.base_lateral[k]
        .iter()
        .zip(&pred.dx)
        .map(|(a, d)| a + d)
        .collect();
    let z = anchors.base_height[k]
        .iter()
        .zip(&pred.dz)
        .map(|(a, d)| a + d)
        .collect();
    let vis: Vec<f64> = pred.visibility_logits.iter().map(|&l| sigmoid(l)).collect();
    let above_threshold = vis.iter().map(|&v| v >= visibility_threshold).collect();
    let lane = Lane3D::new(
        anchors.stations.clone(),
        x,
        z,
        vis,
        argmax(&pred.class_logits),
    )?;
    Ok(DecodedLane {
        anchor: k,
        lane,
        above_threshold,
    })
}

/// Linear interpolation weights for `t` on strictly increasing `knots`:
/// returns `(i, w)` with value `(1 - w) * v[i] + w * v[i + 1]`.
pub(crate) fn bracket(knots: &[f64], t: f64) -> (usize, f64) {
    let n = knots.len();
    let upper = knots.partition_point(|&s| s <= t).clamp(1, n - 1);
    let i = upper - 1;
    let w = (t - knots[i]) / (knots[i + 1] - knots[i]);
    (i, w)
}

pub(crate) fn lerp(values: &[f64], i: usize, w: f64) -> f64 {
    if w == 0.0 {
        values[i]
    } else if w == 1.0 {
        values[i + 1]
    } else {
        (1.0 - w) * values[i] + w * values[i + 1]
    }
}

/// Piecewise-linear resampling of `x`, `z` and visibility onto `targets`.
/// No extrapolation.
pub fn resample_lane(lane: &Lane3D, targets: &[f64]) -> Result<Lane3D> {
    if lane.len() < 2 {
        return Err(Error::Empty("resampling needs a lane with at least two stations"));
    }
    let first = lane.stations[0];
    let last = *lane.stations.last().unwrap();
    if let Some(&bad) = targets.iter().find(|&&t| !(first..=last).contains(&t)) {
        return Err(Error::Extrapolation {
            station: bad,
            first,
            last,
        });
    }
    let mut x = Vec::with_capacity(targets.len());
    let mut z = Vec::with_capacity(targets.len());
    let mut v = Vec::with_capacity(targets.len());
    for &t in targets {
        let (i, w) = bracket(&lane.stations, t);
        x.push(lerp(&lane.lateral, i, w));
        z.push(lerp(&lane.height, i, w));
        v.push(lerp(&lane.visibility, i, w).clamp(0.0, 1.0));
    }
    Lane3D::new(targets.to_vec(), x, z, v, lane.category)
}

pub fn read_lane_file(path: &Path) -> Result<Vec<Lane3D>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_lane_file(path: &Path, lanes: &[Lane3D]) -> Result<()> {
    let text = serde_json::to_string_pretty(lanes).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
