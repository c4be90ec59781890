//! Seeded synthetic driving scenes.
//!
//! World lanes are parallel quadratics `x(s) = c0 + c1 s + c2 s^2` with
//! linear height `z(s) = h0 + h1 s`, expressed in the frame of the ego
//! vehicle at the first frame. The ego drives forward with constant speed
//! and yaw rate. Per-anchor features are a fixed linear encoding of each
//! anchor's true offsets, visibility and class plus Gaussian noise drawn
//! independently for every frame.
//!
//! Feature layout for `S` stations and `N` classes (background included):
//!
//! | coordinates        | content                          |
//! |--------------------|----------------------------------|
//! | `0 .. S`           | `offset_scale * dx_j`            |
//! | `S .. 2S`          | `offset_scale * dz_j`            |
//! | `2S .. 3S`         | `visibility_scale * v_j`         |
//! | `3S .. 3S + N`     | `class_scale * onehot(class)`    |
//! | rest               | `0`                              |

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{argmax, read_lane_file, write_lane_file, AnchorSet, Lane3D};
use crate::heads::{assign_targets, AnchorTarget, BACKGROUND};

/// Motion from the previous frame into this one: drive `forward` meters
/// along the previous heading, then yaw by `yaw` radians (positive yaw
/// rotates the heading from `+y` towards `-x`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EgoMotion {
    pub forward: f64,
    pub yaw: f64,
}

impl EgoMotion {
    /// Re-express a point of the previous ego frame in this frame.
    pub fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        let (sin, cos) = self.yaw.sin_cos();
        let y = p[1] - self.forward;
        [cos * p[0] + sin * y, -sin * p[0] + cos * y, p[2]]
    }
}

/// Ego pose in the world (first-frame) coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn advance(&self, m: &EgoMotion) -> Pose {
        let (sin, cos) = self.heading.sin_cos();
        Pose {
            x: self.x - sin * m.forward,
            y: self.y + cos * m.forward,
            heading: self.heading + m.yaw,
        }
    }

    /// World point to ego coordinates.
    pub fn to_ego(&self, p: [f64; 3]) -> [f64; 3] {
        let (sin, cos) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [cos * dx + sin * dy, -sin * dx + cos * dy, p[2]]
    }
}

/// A lane in world coordinates, parameterised by world `s` (the first
/// frame's forward axis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldLane {
    pub lateral: [f64; 3],
    pub height: [f64; 2],
    /// Visible for `s` in `[visible[0], visible[1]]`.
    pub visible: [f64; 2],
    pub category: usize,
}

impl WorldLane {
    pub fn point(&self, s: f64) -> [f64; 3] {
        let [c0, c1, c2] = self.lateral;
        let [h0, h1] = self.height;
        [c0 + c1 * s + c2 * s * s, s, h0 + h1 * s]
    }

    fn slope(&self, s: f64) -> f64 {
        self.lateral[1] + 2.0 * self.lateral[2] * s
    }

    /// World parameter `s` whose point lies at ego longitudinal `y`.
    pub fn solve_station(&self, pose: &Pose, y: f64) -> Result<f64> {
        let (sin, cos) = pose.heading.sin_cos();
        let mut s = pose.y + y;
        for _ in 0..60 {
            let p = self.point(s);
            let f = -sin * (p[0] - pose.x) + cos * (p[1] - pose.y) - y;
            let df = -sin * self.slope(s) + cos;
            if df.abs() < 1e-9 {
                break;
            }
            let step = f / df;
            s -= step;
            if step.abs() <= 1e-14 * (1.0 + s.abs()) {
                return Ok(s);
            }
        }
        Err(Error::domain("lane sampling", format!("no crossing found at y = {y}")))
    }

    /// Ego-frame point of this lane at longitudinal `y`, with visibility.
    pub fn sample_point(&self, pose: &Pose, y: f64) -> Result<([f64; 3], f64)> {
        let s = self.solve_station(pose, y)?;
        let q = pose.to_ego(self.point(s));
        let vis = if (self.visible[0]..=self.visible[1]).contains(&s) {
            1.0
        } else {
            0.0
        };
        Ok(([q[0], y, q[2]], vis))
    }

    pub fn sample(&self, pose: &Pose, stations: &[f64]) -> Result<Lane3D> {
        let mut x = Vec::with_capacity(stations.len());
        let mut z = Vec::with_capacity(stations.len());
        let mut v = Vec::with_capacity(stations.len());
        for &y in stations {
            let (p, vis) = self.sample_point(pose, y)?;
            x.push(p[0]);
            z.push(p[2]);
            v.push(vis);
        }
        Lane3D::new(stations.to_vec(), x, z, v, self.category)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureEncoding {
    pub offset_scale: f64,
    pub visibility_scale: f64,
    pub class_scale: f64,
}

impl Default for FeatureEncoding {
    fn default() -> Self {
        Self {
            offset_scale: 0.1,
            visibility_scale: 1.0,
            class_scale: 0.5,
        }
    }
}

/// What an ideal backbone would know about one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTruth {
    pub dx: Vec<f64>,
    pub dz: Vec<f64>,
    pub visibility: Vec<f64>,
    pub class: usize,
}

impl AnchorTruth {
    pub fn background(stations: usize) -> Self {
        Self {
            dx: vec![0.0; stations],
            dz: vec![0.0; stations],
            visibility: vec![0.0; stations],
            class: BACKGROUND,
        }
    }
}

pub fn min_channels(stations: usize, classes: usize) -> usize {
    3 * stations + classes
}

pub fn feature_encode(
    truth: &AnchorTruth,
    classes: usize,
    channels: usize,
    enc: &FeatureEncoding,
) -> Result<Array1<f64>> {
    let s = truth.dx.len();
    check_len("truth dz", s, truth.dz.len())?;
    check_len("truth visibility", s, truth.visibility.len())?;
    if channels < min_channels(s, classes) {
        return Err(Error::config(
            "scene.channels",
            format!("{channels} < {} needed to encode the anchor truth", min_channels(s, classes)),
        ));
    }
    if truth.class >= classes {
        return Err(Error::IndexOutOfRange {
            what: "class",
            index: truth.class,
            len: classes,
        });
    }
    let mut f = Array1::zeros(channels);
    for j in 0..s {
        f[j] = enc.offset_scale * truth.dx[j];
        f[s + j] = enc.offset_scale * truth.dz[j];
        f[2 * s + j] = enc.visibility_scale * truth.visibility[j];
    }
    f[3 * s + truth.class] = enc.class_scale;
    Ok(f)
}

/// Linear inverse of [`feature_encode`] on the information-carrying
/// coordinates; the class is read off by argmax.
pub fn feature_decode(
    features: ArrayView1<'_, f64>,
    stations: usize,
    classes: usize,
    enc: &FeatureEncoding,
) -> AnchorTruth {
    let s = stations;
    AnchorTruth {
        dx: (0..s).map(|j| features[j] / enc.offset_scale).collect(),
        dz: (0..s).map(|j| features[s + j] / enc.offset_scale).collect(),
        visibility: (0..s)
            .map(|j| features[2 * s + j] / enc.visibility_scale)
            .collect(),
        class: argmax(&features.slice(s![3 * s..3 * s + classes]).to_vec()),
    }
}

/// Per-anchor truth for one frame: the assigned anchor of every lane
/// carries that lane; all other anchors look like background.
pub fn anchor_truths(anchors: &AnchorSet, lanes: &[Lane3D]) -> Result<Vec<AnchorTruth>> {
    let targets = assign_targets(anchors, lanes, 1.0)?;
    targets
        .iter()
        .enumerate()
        .map(|(k, t)| match *t {
            AnchorTarget::Positive(g) => {
                let (dx, dz) = anchors.encode(k, &lanes[g])?;
                Ok(AnchorTruth {
                    dx,
                    dz,
                    visibility: lanes[g].visibility().to_vec(),
                    class: lanes[g].category(),
                })
            }
            _ => Ok(AnchorTruth::background(anchors.station_count())),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub lane_count: [usize; 2],
    /// Lane categories, not counting background.
    pub categories: usize,
    pub lane_spacing: [f64; 2],
    pub lateral_offset: [f64; 2],
    pub heading: [f64; 2],
    pub curvature: [f64; 2],
    pub height_offset: [f64; 2],
    pub grade: [f64; 2],
    pub visible_start: [f64; 2],
    pub visible_end: [f64; 2],
    /// Standard deviation of the per-frame feature noise.
    pub noise: f64,
    /// m/s
    pub ego_speed: [f64; 2],
    /// rad/s
    pub yaw_rate: [f64; 2],
    /// s between frames
    pub frame_interval: f64,
    /// Frames fused per prediction (`T`).
    pub clip_len: usize,
    /// Extra frames before the final clip, used for sliding-window
    /// predictions when measuring jitter.
    pub lead_frames: usize,
    pub channels: usize,
    pub encoding: FeatureEncoding,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            lane_count: [2, 4],
            categories: 4,
            lane_spacing: [3.3, 3.9],
            lateral_offset: [-1.5, 1.5],
            heading: [-0.02, 0.02],
            curvature: [-3e-4, 3e-4],
            height_offset: [-0.3, 0.3],
            grade: [-0.02, 0.02],
            visible_start: [-10.0, 15.0],
            visible_end: [45.0, 120.0],
            noise: 0.25,
            ego_speed: [8.0, 15.0],
            yaw_rate: [-0.05, 0.05],
            frame_interval: 0.1,
            clip_len: 3,
            lead_frames: 2,
            channels: 128,
            encoding: FeatureEncoding::default(),
        }
    }
}

fn check_range(field: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::config(field, "must be a finite [low, high] range"));
    }
    Ok(())
}

fn draw<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

impl SceneConfig {
    /// Classes seen by the heads: background plus the lane categories.
    pub fn classes(&self) -> usize {
        self.categories + 1
    }

    pub fn frames(&self) -> usize {
        self.clip_len + self.lead_frames
    }

    pub fn validate(&self, anchors: &AnchorSet) -> Result<()> {
        if self.lane_count[0] > self.lane_count[1] {
            return Err(Error::config("scene.lane_count", "low exceeds high"));
        }
        if self.categories < 1 {
            return Err(Error::config("scene.categories", "need at least one category"));
        }
        for (name, r) in [
            ("scene.lane_spacing", self.lane_spacing),
            ("scene.lateral_offset", self.lateral_offset),
            ("scene.heading", self.heading),
            ("scene.curvature", self.curvature),
            ("scene.height_offset", self.height_offset),
            ("scene.grade", self.grade),
            ("scene.visible_start", self.visible_start),
            ("scene.visible_end", self.visible_end),
            ("scene.ego_speed", self.ego_speed),
            ("scene.yaw_rate", self.yaw_rate),
        ] {
            check_range(name, r)?;
        }
        if self.visible_start[1] >= self.visible_end[0] {
            return Err(Error::config("scene.visible_end", "must start after visible_start ends"));
        }
        if self.heading[0].abs().max(self.heading[1].abs()) >= 0.5 {
            return Err(Error::config("scene.heading", "lanes must run roughly forward"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("scene.noise", "must be non-negative"));
        }
        if !(self.frame_interval > 0.0) {
            return Err(Error::config("scene.frame_interval", "must be positive"));
        }
        if self.clip_len < 1 {
            return Err(Error::config("scene.clip_len", "need at least one frame"));
        }
        let need = min_channels(anchors.station_count(), self.classes());
        if self.channels < need {
            return Err(Error::config(
                "scene.channels",
                format!("{} < {need} needed to encode the anchor truth", self.channels),
            ));
        }
        let e = &self.encoding;
        if !(e.offset_scale > 0.0 && e.visibility_scale > 0.0 && e.class_scale > 0.0) {
            return Err(Error::config("scene.encoding", "scales must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneFrame {
    pub lanes: Vec<Lane3D>,
    /// `K x C`
    pub features: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub seed: u64,
    /// `ego_motion[t]` carries frame `t - 1` into frame `t`; entry 0 is zero.
    pub ego_motion: Vec<EgoMotion>,
    pub frames: Vec<SceneFrame>,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn last(&self) -> &SceneFrame {
        self.frames.last().expect("scene has frames")
    }
}

/// Generated scene together with the world truth behind it.
#[derive(Clone, Debug)]
pub struct SimulatedScene {
    pub sequence: SceneSequence,
    pub world_lanes: Vec<WorldLane>,
    pub poses: Vec<Pose>,
}

pub fn simulate_scene(seed: u64, config: &SceneConfig, anchors: &AnchorSet) -> Result<SimulatedScene> {
    config.validate(anchors)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_lanes = rng.random_range(config.lane_count[0]..=config.lane_count[1]);
    let spacing = draw(&mut rng, config.lane_spacing);
    let center = draw(&mut rng, config.lateral_offset);
    let c1 = draw(&mut rng, config.heading);
    let c2 = draw(&mut rng, config.curvature);
    let h0 = draw(&mut rng, config.height_offset);
    let h1 = draw(&mut rng, config.grade);
    let world_lanes: Vec<WorldLane> = (0..n_lanes)
        .map(|i| {
            let c0 = center + (i as f64 - (n_lanes as f64 - 1.0) / 2.0) * spacing;
            WorldLane {
                lateral: [c0, c1, c2],
                height: [h0, h1],
                visible: [
                    draw(&mut rng, config.visible_start),
                    draw(&mut rng, config.visible_end),
                ],
                category: rng.random_range(1..=config.categories),
            }
        })
        .collect();

    let speed = draw(&mut rng, config.ego_speed);
    let yaw_rate = draw(&mut rng, config.yaw_rate);
    let step = EgoMotion {
        forward: speed * config.frame_interval,
        yaw: yaw_rate * config.frame_interval,
    };
    let n_frames = config.frames();
    let mut ego_motion = vec![EgoMotion::default()];
    ego_motion.extend(std::iter::repeat_n(step, n_frames - 1));
    let mut poses = vec![Pose::default()];
    for m in &ego_motion[1..] {
        let next = poses.last().unwrap().advance(m);
        poses.push(next);
    }

    let noise = (config.noise > 0.0)
        .then(|| Normal::new(0.0, config.noise).expect("validated noise"));
    let classes = config.classes();
    let mut frames = Vec::with_capacity(n_frames);
    for pose in &poses {
        let mut lanes = Vec::new();
        for wl in &world_lanes {
            let lane = wl.sample(pose, anchors.stations())?;
            if lane.visibility().iter().filter(|&&v| v >= 0.5).count() >= 2 {
                lanes.push(lane);
            }
        }
        let truths = anchor_truths(anchors, &lanes)?;
        let mut features = Array2::zeros((anchors.count(), config.channels));
        for (k, t) in truths.iter().enumerate() {
            let mut row = features.row_mut(k);
            row.assign(&feature_encode(t, classes, config.channels, &config.encoding)?);
            if let Some(n) = &noise {
                row.iter_mut().for_each(|v| *v += n.sample(&mut rng));
            }
        }
        frames.push(SceneFrame { lanes, features });
    }

    Ok(SimulatedScene {
        sequence: SceneSequence {
            seed,
            ego_motion,
            frames,
        },
        world_lanes,
        poses,
    })
}

pub fn generate_scene(seed: u64, config: &SceneConfig, anchors: &AnchorSet) -> Result<SceneSequence> {
    Ok(simulate_scene(seed, config, anchors)?.sequence)
}

/// Which half of the benchmark a scene belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

pub fn scene_seed(base: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7261_696e,
        Split::Eval => 0x6576_616c,
    };
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag << 20)
        .wrapping_add(index as u64)
}

pub fn generate_split(
    base_seed: u64,
    split: Split,
    count: usize,
    config: &SceneConfig,
    anchors: &AnchorSet,
) -> Result<Vec<SceneSequence>> {
    (0..count)
        .map(|i| generate_scene(scene_seed(base_seed, split, i), config, anchors))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct FeatureSidecar {
    seed: u64,
    ego_motion: Vec<EgoMotion>,
    /// `frames x K x C`
    features: Vec<Vec<Vec<f64>>>,
}

pub const SIDECAR_FILE: &str = "features.json";

pub fn lane_file_name(frame: usize) -> String {
    format!("frame_{frame:02}.lanes.json")
}

/// Write `dir/frame_XX.lanes.json` per frame plus `dir/features.json`.
pub fn write_scene(dir: &Path, scene: &SceneSequence) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in scene.frames.iter().enumerate() {
        write_lane_file(&dir.join(lane_file_name(t)), &f.lanes)?;
    }
    let sidecar = FeatureSidecar {
        seed: scene.seed,
        ego_motion: scene.ego_motion.clone(),
        features: scene
            .frames
            .iter()
            .map(|f| f.features.rows().into_iter().map(|r| r.to_vec()).collect())
            .collect(),
    };
    let path = dir.join(SIDECAR_FILE);
    let text = serde_json::to_string(&sidecar).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_scene(dir: &Path) -> Result<SceneSequence> {
    let path = dir.join(SIDECAR_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: FeatureSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    check_len("sidecar ego motion", sidecar.features.len(), sidecar.ego_motion.len())?;
    let mut frames = Vec::with_capacity(sidecar.features.len());
    for (t, rows) in sidecar.features.into_iter().enumerate() {
        let k = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::config(path.display().to_string(), "ragged feature rows"));
        }
        let features = Array2::from_shape_vec((k, c), rows.into_iter().flatten().collect())
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        let lanes = read_lane_file(&dir.join(lane_file_name(t)))?;
        frames.push(SceneFrame { lanes, features });
    }
    if frames.is_empty() {
        return Err(Error::Empty("scene has no frames"));
    }
    Ok(SceneSequence {
        seed: sidecar.seed,
        ego_motion: sidecar.ego_motion,
        frames,
    })
}

pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Read every `scene_XXXX` directory under `root`, in name order.
pub fn read_scenes(root: &Path) -> Result<Vec<SceneSequence>> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(SIDECAR_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Empty("no scene directories found"));
    }
    dirs.iter().map(|d| read_scene(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_default_anchors, AnchorLayout};

    fn small() -> (SceneConfig, AnchorSet) {
        let anchors = build_default_anchors(&AnchorLayout {
            count: 12,
            lateral_span: [-8.0, 8.0],
            stations: vec![3.0, 13.0, 23.0, 33.0, 43.0],
        })
        .unwrap();
        let cfg = SceneConfig {
            channels: 24,
            ..SceneConfig::default()
        };
        (cfg, anchors)
    }

    #[test]
    fn noise_free_single_frame_is_the_encoding() {
        let (mut cfg, anchors) = small();
        cfg.noise = 0.0;
        cfg.clip_len = 1;
        cfg.lead_frames = 0;
        let scene = generate_scene(3, &cfg, &anchors).unwrap();
        assert_eq!(scene.len(), 1);
        let truths = anchor_truths(&anchors, &scene.frames[0].lanes).unwrap();
        for (k, t) in truths.iter().enumerate() {
            let enc = feature_encode(t, cfg.classes(), cfg.channels, &cfg.encoding).unwrap();
            assert_eq!(scene.frames[0].features.row(k), enc);
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let (cfg, anchors) = small();
        let a = generate_scene(42, &cfg, &anchors).unwrap();
        let b = generate_scene(42, &cfg, &anchors).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(43, &cfg, &anchors).unwrap());
    }

    #[test]
    fn straight_motion_shifts_points_back() {
        let m = EgoMotion {
            forward: 10.0 * 0.1,
            yaw: 0.0,
        };
        assert_eq!(m.transform([0.5, 10.0, 0.2]), [0.5, 9.0, 0.2]);
    }

    #[test]
    fn background_encoding() {
        let enc = FeatureEncoding::default();
        let f = feature_encode(&AnchorTruth::background(5), 5, 24, &enc).unwrap();
        assert_eq!(f[15 + BACKGROUND], enc.class_scale);
        assert_eq!(f.iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(feature_encode(&AnchorTruth::background(5), 5, 19, &enc).is_err());
    }

    #[test]
    fn linear_decoder_recovers_truth() {
        // Probe the encoding matrix column by column, then solve the normal
        // equations E^T E u = E^T f for one encoded truth.
        let enc = FeatureEncoding {
            offset_scale: 0.3,
            visibility_scale: 1.7,
            class_scale: 0.6,
        };
        let (s, classes, c) = (4, 3, 20);
        let dim = 3 * s + classes;
        let unpack = |u: &[f64]| AnchorTruth {
            dx: u[..s].to_vec(),
            dz: u[s..2 * s].to_vec(),
            visibility: u[2 * s..3 * s].to_vec(),
            class: 0,
        };
        let column = |i: usize| -> Vec<f64> {
            let mut u = vec![0.0; dim];
            if i < 3 * s {
                u[i] = 1.0;
            }
            let mut t = unpack(&u);
            let mut f = feature_encode(&t, classes, c, &enc).unwrap();
            if i >= 3 * s {
                t.class = i - 3 * s;
                f = feature_encode(&t, classes, c, &enc).unwrap();
            } else {
                f[3 * s] -= enc.class_scale;
            }
            f.to_vec()
        };
        let e: Vec<Vec<f64>> = (0..dim).map(column).collect();
        let truth = AnchorTruth {
            dx: vec![1.0, -2.5, 0.25, 3.0],
            dz: vec![0.1, 0.0, -0.2, 0.05],
            visibility: vec![1.0, 1.0, 0.0, 1.0],
            class: 2,
        };
        let f = feature_encode(&truth, classes, c, &enc).unwrap();
        let mut ete = vec![vec![0.0; dim]; dim];
        let mut etf = vec![0.0; dim];
        for i in 0..dim {
            for j in 0..dim {
                ete[i][j] = (0..c).map(|r| e[i][r] * e[j][r]).sum();
            }
            etf[i] = (0..c).map(|r| e[i][r] * f[r]).sum();
        }
        // E has orthogonal columns, so E^T E is diagonal.
        for i in 0..dim {
            for j in 0..dim {
                if i != j {
                    assert_eq!(ete[i][j], 0.0);
                }
            }
        }
        let u: Vec<f64> = (0..dim).map(|i| etf[i] / ete[i][i]).collect();
        for j in 0..s {
            assert!((u[j] - truth.dx[j]).abs() < 1e-12);
            assert!((u[s + j] - truth.dz[j]).abs() < 1e-12);
            assert!((u[2 * s + j] - truth.visibility[j]).abs() < 1e-12);
        }
        assert_eq!(argmax(&u[3 * s..]), 2);
        let d = feature_decode(f.view(), s, classes, &enc);
        for j in 0..s {
            assert!((d.dx[j] - truth.dx[j]).abs() < 1e-12);
            assert!((d.dz[j] - truth.dz[j]).abs() < 1e-12);
        }
        assert_eq!(d.class, 2);
    }

    #[test]
    fn lanes_are_rigidly_re_expressed_between_frames() {
        let (cfg, anchors) = small();
        for seed in 0..20 {
            let sim = simulate_scene(seed, &cfg, &anchors).unwrap();
            for t in 0..sim.poses.len() - 1 {
                let motion = sim.sequence.ego_motion[t + 1];
                for wl in &sim.world_lanes {
                    for &y in anchors.stations() {
                        let (p, _) = wl.sample_point(&sim.poses[t], y).unwrap();
                        let q = motion.transform(p);
                        let (r, _) = wl.sample_point(&sim.poses[t + 1], q[1]).unwrap();
                        assert!((r[0] - q[0]).abs() < 1e-9, "seed {seed} frame {t}");
                        assert!((r[2] - q[2]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn frame_averaging_divides_noise_variance_by_clip_length() {
        let (mut cfg, anchors) = small();
        cfg.lead_frames = 0;
        cfg.clip_len = 3;
        let mut single = Vec::new();
        let mut averaged = Vec::new();
        for seed in 0..1000 {
            let scene = generate_scene(10_000 + seed, &cfg, &anchors).unwrap();
            let noise_at = |t: usize| -> f64 {
                let frame = &scene.frames[t];
                let truths = anchor_truths(&anchors, &frame.lanes).unwrap();
                let enc = feature_encode(&truths[5], cfg.classes(), cfg.channels, &cfg.encoding)
                    .unwrap();
                frame.features[[5, 7]] - enc[7]
            };
            single.push(noise_at(0));
            averaged.push((noise_at(0) + noise_at(1) + noise_at(2)) / 3.0);
        }
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let ratio = var(&averaged) / var(&single);
        assert!((ratio * 3.0 - 1.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn invalid_configs() {
        let (cfg, anchors) = small();
        let bad = SceneConfig {
            lane_count: [4, 2],
            ..cfg.clone()
        };
        assert!(generate_scene(0, &bad, &anchors).is_err());
        let bad = SceneConfig {
            channels: 10,
            ..cfg.clone()
        };
        let err = generate_scene(0, &bad, &anchors).unwrap_err();
        assert!(err.to_string().contains("scene.channels"));
        let bad = SceneConfig { noise: -1.0, ..cfg };
        assert!(generate_scene(0, &bad, &anchors).is_err());
    }

    #[test]
    fn scene_files_round_trip() {
        let (cfg, anchors) = small();
        let scene = generate_scene(8, &cfg, &anchors).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join(scene_dir_name(0));
        write_scene(&d, &scene).unwrap();
        assert_eq!(read_scene(&d).unwrap(), scene);
        assert_eq!(read_scenes(dir.path()).unwrap(), vec![scene]);
    }
}
