//! Lane matching (precision / recall / F1 / category accuracy) and the
//! frame-to-frame jitter of predicted lanes.
//!
//! A prediction is *admissible* for a ground-truth lane when at least
//! `coverage` of the ground-truth visible stations have a visible predicted
//! point within `threshold` meters (3D). Admissible pairs are matched
//! one-to-one, maximising the number of matches first and minimising the
//! summed per-pair cost second. The pair cost is the mean over the
//! ground-truth visible stations of the point distance capped at
//! `threshold`; stations the prediction does not cover count as
//! `threshold`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assignment::min_cost_pairs;
use crate::error::{check_len, Error, Result};
use crate::geometry::{bracket, lerp, Lane3D, DEFAULT_VISIBILITY_THRESHOLD};
use crate::synth::EgoMotion;

pub const DEFAULT_DISTANCE_THRESHOLD: f64 = 1.5;
pub const DEFAULT_COVERAGE: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// meters
    pub threshold: f64,
    /// Fraction of ground-truth visible stations that must be close.
    pub coverage: f64,
    /// Decoded visibility below this marks a point as not predicted.
    pub visibility_threshold: f64,
    /// Detections whose mean lateral gap to a stronger detection is below
    /// this many meters are suppressed.
    pub nms_distance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_DISTANCE_THRESHOLD,
            coverage: DEFAULT_COVERAGE,
            visibility_threshold: DEFAULT_VISIBILITY_THRESHOLD,
            nms_distance: 2.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        check_protocol(self.threshold, self.coverage)?;
        if !(0.0..=1.0).contains(&self.visibility_threshold) {
            return Err(Error::config("eval.visibility_threshold", "must lie in [0, 1]"));
        }
        if !(self.nms_distance >= 0.0) {
            return Err(Error::config("eval.nms_distance", "must be non-negative"));
        }
        Ok(())
    }
}

fn check_protocol(threshold: f64, coverage: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::config("eval.threshold", "must be positive"));
    }
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::config("eval.coverage", "must lie in (0, 1]"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneMatch {
    pub pred: usize,
    pub gt: usize,
    /// Mean 3D distance over the ground-truth visible stations.
    pub mean_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Matched pairs whose categories agree.
    pub correct_category: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub matches: Vec<LaneMatch>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MatchReport {
    pub fn from_counts(
        tp: usize,
        fp: usize,
        fn_: usize,
        correct: usize,
        matches: Vec<LaneMatch>,
    ) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            correct_category: correct,
            precision,
            recall,
            f1,
            accuracy: ratio(correct, tp),
            matches,
        }
    }

    /// Micro-average: pool the counts, then recompute the ratios.
    pub fn aggregate(reports: &[MatchReport]) -> Self {
        let sum = |f: fn(&MatchReport) -> usize| reports.iter().map(f).sum();
        Self::from_counts(
            sum(|r| r.true_positives),
            sum(|r| r.false_positives),
            sum(|r| r.false_negatives),
            sum(|r| r.correct_category),
            Vec::new(),
        )
    }
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Point and visibility of `lane` at station `y`, or `None` outside its
/// support.
fn sample_at(lane: &Lane3D, y: f64) -> Option<([f64; 3], f64)> {
    let st = lane.stations();
    if y < st[0] || y > st[st.len() - 1] {
        return None;
    }
    if st.len() == 1 {
        return Some((lane.point(0), lane.visibility()[0]));
    }
    let (i, w) = bracket(st, y);
    Some((
        [lerp(lane.lateral(), i, w), y, lerp(lane.height(), i, w)],
        lerp(lane.visibility(), i, w),
    ))
}

struct PairScore {
    admissible: bool,
    cost: f64,
    mean_distance: f64,
}

fn score_pair(pred: &Lane3D, gt: &Lane3D, threshold: f64, coverage: f64) -> PairScore {
    let mut close = 0usize;
    let mut visible = 0usize;
    let mut capped = 0.0;
    let mut raw = 0.0;
    for j in 0..gt.len() {
        if !gt.is_visible(j, DEFAULT_VISIBILITY_THRESHOLD) {
            continue;
        }
        visible += 1;
        let g = gt.point(j);
        let d = match sample_at(pred, g[1]) {
            Some((p, v)) if v >= DEFAULT_VISIBILITY_THRESHOLD => Some(dist3(p, g)),
            _ => None,
        };
        match d {
            Some(d) => {
                raw += d;
                capped += d.min(threshold);
                if d <= threshold {
                    close += 1;
                }
            }
            None => {
                raw += threshold;
                capped += threshold;
            }
        }
    }
    if visible == 0 {
        return PairScore {
            admissible: false,
            cost: threshold,
            mean_distance: f64::INFINITY,
        };
    }
    let n = visible as f64;
    PairScore {
        admissible: close as f64 >= coverage * n,
        cost: capped / n,
        mean_distance: raw / n,
    }
}

/// Match predictions to ground truth; see the module docs for the rules.
pub fn match_lanes(
    preds: &[Lane3D],
    gts: &[Lane3D],
    threshold: f64,
    coverage: f64,
) -> Result<MatchReport> {
    check_protocol(threshold, coverage)?;
    let scores: Vec<Vec<PairScore>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| score_pair(p, g, threshold, coverage)).collect())
        .collect();
    // Any inadmissible pair must cost more than every admissible matching
    // so that the assignment maximises the match count first.
    let big = threshold * (preds.len().min(gts.len()) as f64 + 1.0) + 1.0;
    let cost: Vec<Vec<f64>> = scores
        .iter()
        .map(|row| {
            row.iter()
                .map(|s| if s.admissible { s.cost } else { big })
                .collect()
        })
        .collect();
    let mut matches: Vec<LaneMatch> = min_cost_pairs(&cost)
        .into_iter()
        .filter(|&(p, g)| scores[p][g].admissible)
        .map(|(p, g)| LaneMatch {
            pred: p,
            gt: g,
            mean_distance: scores[p][g].mean_distance,
        })
        .collect();
    matches.sort_by_key(|m| (m.pred, m.gt));
    let tp = matches.len();
    let correct = matches
        .iter()
        .filter(|m| preds[m.pred].category() == gts[m.gt].category())
        .count();
    Ok(MatchReport::from_counts(
        tp,
        preds.len() - tp,
        gts.len() - tp,
        correct,
        matches,
    ))
}

/// Carry a lane of the previous frame into the current one.
pub fn transport_lane(lane: &Lane3D, motion: &EgoMotion) -> Result<Lane3D> {
    let mut st = Vec::with_capacity(lane.len());
    let mut x = Vec::with_capacity(lane.len());
    let mut z = Vec::with_capacity(lane.len());
    for p in lane.points() {
        let q = motion.transform(p);
        x.push(q[0]);
        st.push(q[1]);
        z.push(q[2]);
    }
    Lane3D::new(st, x, z, lane.visibility().to_vec(), lane.category())
}

/// Mean `|x_{t+1}(y) - x_{t->t+1}(y)|` over matched lane pairs of
/// consecutive frames and the stations both see. `ego_motion[t]` carries
/// frame `t - 1` into frame `t`.
pub fn temporal_smoothness(
    frames: &[Vec<Lane3D>],
    ego_motion: &[EgoMotion],
    threshold: f64,
    coverage: f64,
) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::Empty("jitter needs at least two frames"));
    }
    check_len("jitter ego motion", frames.len(), ego_motion.len())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..frames.len() - 1 {
        let carried = frames[t]
            .iter()
            .map(|l| transport_lane(l, &ego_motion[t + 1]))
            .collect::<Result<Vec<_>>>()?;
        let next = &frames[t + 1];
        let report = match_lanes(next, &carried, threshold, coverage)?;
        for m in &report.matches {
            let (cur, old) = (&next[m.pred], &carried[m.gt]);
            for j in 0..cur.len() {
                if !cur.is_visible(j, DEFAULT_VISIBILITY_THRESHOLD) {
                    continue;
                }
                let y = cur.stations()[j];
                if let Some((p, v)) = sample_at(old, y) {
                    if v >= DEFAULT_VISIBILITY_THRESHOLD {
                        sum += (cur.lateral()[j] - p[0]).abs();
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("no lanes matched across frames"));
    }
    Ok(sum / count as f64)
}

/// One row of the per-scene metric table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub report: MatchReport,
    /// `None` when the scene has a single prediction frame or nothing
    /// matched across frames.
    pub jitter: Option<f64>,
}

/// Write `scene_id,TP,FP,FN,precision,recall,F1,Acc,jitter` rows, then an
/// `all` row holding the pooled counts and mean jitter.
pub fn write_metrics_csv(path: &Path, rows: &[SceneMetrics], overall: &SceneMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scene_id", "TP", "FP", "FN", "precision", "recall", "F1", "Acc", "jitter"])?;
    for r in rows.iter().chain(std::iter::once(overall)) {
        let m = &r.report;
        w.write_record([
            r.scene_id.clone(),
            m.true_positives.to_string(),
            m.false_positives.to_string(),
            m.false_negatives.to_string(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.f1.to_string(),
            m.accuracy.to_string(),
            r.jitter.map_or_else(String::new, |j| j.to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean of the available per-scene jitters.
pub fn mean_jitter(rows: &[SceneMetrics]) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.jitter).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ST: [f64; 6] = [5.0, 15.0, 25.0, 35.0, 45.0, 55.0];

    fn lane(x0: f64, slope: f64, cat: usize) -> Lane3D {
        Lane3D::new(
            ST.to_vec(),
            ST.iter().map(|y| x0 + slope * y).collect(),
            vec![0.0; ST.len()],
            vec![1.0; ST.len()],
            cat,
        )
        .unwrap()
    }

    #[test]
    fn identical_sets_score_one() {
        let gts = vec![lane(-3.5, 0.0, 1), lane(0.0, 0.01, 2), lane(3.5, 0.0, 1)];
        let r = match_lanes(&gts, &gts, 1.5, 0.75).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.accuracy), (1.0, 1.0, 1.0, 1.0));
        assert!(r.matches.iter().all(|m| m.pred == m.gt && m.mean_distance == 0.0));
    }

    #[test]
    fn one_of_two() {
        let gts = vec![lane(-2.0, 0.0, 1), lane(2.0, 0.0, 1)];
        let preds = vec![lane(-1.8, 0.0, 1)];
        let r = match_lanes(&preds, &gts, 1.5, 0.75).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.5);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn no_predictions() {
        let r = match_lanes(&[], &[lane(0.0, 0.0, 1)], 1.5, 0.75).unwrap();
        assert_eq!((r.f1, r.false_negatives), (0.0, 1));
        let r = match_lanes(&[], &[], 1.5, 0.75).unwrap();
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn coverage_counts_gt_visible_stations_only() {
        // Prediction is close on 4 of 6 stations: 0.67 < 0.75.
        let gt = lane(0.0, 0.0, 1);
        let x = vec![0.0, 0.0, 0.0, 0.0, 3.0, 3.0];
        let pred = Lane3D::new(ST.to_vec(), x, vec![0.0; 6], vec![1.0; 6], 1).unwrap();
        assert_eq!(match_lanes(std::slice::from_ref(&pred), std::slice::from_ref(&gt), 1.5, 0.75).unwrap().true_positives, 0);
        assert_eq!(match_lanes(std::slice::from_ref(&pred), &[gt], 1.5, 0.6).unwrap().true_positives, 1);
        // Hide the two far ground-truth points: now 4/4.
        let gt = Lane3D::new(ST.to_vec(), vec![0.0; 6], vec![0.0; 6], vec![1., 1., 1., 1., 0., 0.], 1)
            .unwrap();
        assert_eq!(match_lanes(&[pred], &[gt], 1.5, 0.75).unwrap().true_positives, 1);
    }

    #[test]
    fn invisible_predicted_points_do_not_count() {
        let gt = lane(0.0, 0.0, 1);
        let pred = Lane3D::new(ST.to_vec(), vec![0.0; 6], vec![0.0; 6], vec![1., 1., 1., 0.2, 0.2, 0.2], 1)
            .unwrap();
        assert_eq!(match_lanes(&[pred], &[gt], 1.5, 0.75).unwrap().true_positives, 0);
    }

    #[test]
    fn wrong_category_lowers_accuracy_only() {
        let gts = vec![lane(-2.0, 0.0, 1), lane(2.0, 0.0, 3)];
        let preds = vec![lane(-2.0, 0.0, 1), lane(2.0, 0.0, 1)];
        let r = match_lanes(&preds, &gts, 1.5, 0.75).unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn rejects_bad_protocol() {
        assert!(match_lanes(&[], &[], 0.0, 0.75).is_err());
        assert!(match_lanes(&[], &[], 1.5, 0.0).is_err());
        assert!(match_lanes(&[], &[], 1.5, 1.5).is_err());
    }

    fn random_lanes<R: Rng>(rng: &mut R, n: usize) -> Vec<Lane3D> {
        (0..n)
            .map(|_| {
                let vis: Vec<f64> = (0..ST.len()).map(|_| if rng.random_bool(0.85) { 1.0 } else { 0.0 }).collect();
                let x0 = rng.random_range(-4.0..4.0);
                let x = ST.iter().map(|_| x0 + rng.random_range(-0.6..0.6)).collect();
                Lane3D::new(ST.to_vec(), x, vec![0.0; 6], vis, rng.random_range(1..3)).unwrap()
            })
            .collect()
    }

    /// Best `(count, cost)` over every partial one-to-one matching of
    /// admissible pairs.
    fn brute(preds: &[Lane3D], gts: &[Lane3D]) -> (usize, f64) {
        fn rec(s: &[Vec<PairScore>], p: usize, used: &mut [bool]) -> (usize, f64) {
            if p == s.len() {
                return (0, 0.0);
            }
            let mut best = rec(s, p + 1, used);
            for g in 0..used.len() {
                if !used[g] && s[p][g].admissible {
                    used[g] = true;
                    let (n, c) = rec(s, p + 1, used);
                    used[g] = false;
                    let cand = (n + 1, c + s[p][g].cost);
                    if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1 - 1e-12) {
                        best = cand;
                    }
                }
            }
            best
        }
        let s: Vec<Vec<PairScore>> = preds
            .iter()
            .map(|p| gts.iter().map(|g| score_pair(p, g, 1.5, 0.75)).collect())
            .collect();
        rec(&s, 0, &mut vec![false; gts.len()])
    }

    #[test]
    fn agrees_with_exhaustive_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let (np, ng) = (rng.random_range(0..=4), rng.random_range(0..=4));
            let preds = random_lanes(&mut rng, np);
            let gts = random_lanes(&mut rng, ng);
            let r = match_lanes(&preds, &gts, 1.5, 0.75).unwrap();
            let (n, c) = brute(&preds, &gts);
            assert_eq!(r.true_positives, n);
            let cost: f64 = r
                .matches
                .iter()
                .map(|m| score_pair(&preds[m.pred], &gts[m.gt], 1.5, 0.75).cost)
                .sum();
            assert!((cost - c).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn swapping_sides_swaps_errors(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_lanes(&mut rng, 3);
            // Fully visible lanes keep the coverage test symmetric.
            let b: Vec<Lane3D> = a.iter().take(2).map(|l| {
                let x = l.lateral().iter().map(|v| v + 0.3).collect();
                Lane3D::new(ST.to_vec(), x, vec![0.0; 6], vec![1.0; 6], 1).unwrap()
            }).collect();
            let a: Vec<Lane3D> = a.iter().map(|l| {
                Lane3D::new(ST.to_vec(), l.lateral().to_vec(), vec![0.0; 6], vec![1.0; 6], 1).unwrap()
            }).collect();
            let ab = match_lanes(&a, &b, 1.5, 0.75).unwrap();
            let ba = match_lanes(&b, &a, 1.5, 0.75).unwrap();
            prop_assert_eq!(ab.false_positives, ba.false_negatives);
            prop_assert_eq!(ab.false_negatives, ba.false_positives);
            prop_assert_eq!(ab.f1, ba.f1);
        }

        #[test]
        fn f1_ignores_lane_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds = random_lanes(&mut rng, 4);
            let gts = random_lanes(&mut rng, 3);
            let base = match_lanes(&preds, &gts, 1.5, 0.75).unwrap();
            let mut p2 = preds.clone();
            p2.reverse();
            let mut g2 = gts.clone();
            g2.rotate_left(1);
            let r = match_lanes(&p2, &g2, 1.5, 0.75).unwrap();
            prop_assert_eq!(r.true_positives, base.true_positives);
            prop_assert_eq!(r.f1, base.f1);
        }

        #[test]
        fn transported_frames_have_zero_jitter(
            forward in 0.0..2.0f64,
            yaw in -0.01..0.01f64,
            x0 in -3.0..3.0f64,
        ) {
            let motion = EgoMotion { forward, yaw };
            let f0 = vec![lane(x0, 0.01, 1), lane(x0 + 3.6, 0.01, 2)];
            let f1 = f0.iter().map(|l| transport_lane(l, &motion)).collect::<Result<Vec<_>>>().unwrap();
            let f2 = f1.iter().map(|l| transport_lane(l, &motion)).collect::<Result<Vec<_>>>().unwrap();
            let j = temporal_smoothness(&[f0, f1, f2], &[EgoMotion::default(), motion, motion], 1.5, 0.75)
                .unwrap();
            prop_assert_eq!(j, 0.0);
        }
    }

    #[test]
    fn static_perfect_predictions_have_zero_jitter() {
        let f = vec![lane(-1.8, 0.0, 1), lane(1.8, 0.0, 1)];
        let still = EgoMotion::default();
        let j = temporal_smoothness(&[f.clone(), f.clone(), f], &[still; 3], 1.5, 0.75).unwrap();
        assert_eq!(j, 0.0);
    }

    #[test]
    fn alternating_offsets() {
        let still = EgoMotion::default();
        let frames = vec![vec![lane(0.1, 0.0, 1)], vec![lane(-0.1, 0.0, 1)], vec![lane(0.1, 0.0, 1)]];
        let j = temporal_smoothness(&frames, &[still; 3], 1.5, 0.75).unwrap();
        assert!((j - 0.2).abs() < 1e-15);
    }

    #[test]
    fn jitter_errors() {
        let still = EgoMotion::default();
        assert!(temporal_smoothness(&[vec![lane(0.0, 0.0, 1)]], &[still], 1.5, 0.75).is_err());
        let far = vec![vec![lane(0.0, 0.0, 1)], vec![lane(5.0, 0.0, 1)]];
        assert!(temporal_smoothness(&far, &[still; 2], 1.5, 0.75).is_err());
    }

    #[test]
    fn aggregate_pools_counts() {
        let a = MatchReport::from_counts(2, 0, 1, 2, vec![]);
        let b = MatchReport::from_counts(1, 1, 0, 0, vec![]);
        let all = MatchReport::aggregate(&[a, b]);
        assert_eq!((all.true_positives, all.false_positives, all.false_negatives), (3, 1, 1));
        assert_eq!(all.precision, 0.75);
        assert!((all.accuracy - 2.0 / 3.0).abs() < 1e-15);
    }
}
