//! Accuracy and timing scores per (algorithm, preset).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logstore::GroundTruthObject;
use crate::pluginproto::{Detection, TaskKind};
use crate::presets::{CropGeometry, PixelBox};

/// Schema tag of the scoring section inside run reports.
pub const SCORING_SCHEMA: &str = "reedsb.scoring/1";

/// Minimum IoU for a detection to count as a match.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("empty samples")]
    EmptySamples,
    #[error("rate must be positive")]
    BadRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingStats {
    pub count: u64,
    pub mean_ns: f64,
    /// Population standard deviation.
    pub std_ns: f64,
    pub min_ns: u64,
    pub max_ns: u64,
    /// Nearest-rank 99th percentile.
    pub p99_ns: u64,
    pub frame_budget_ns: f64,
    /// `mean + 3 * std <= frame_budget`.
    pub feasible: bool,
}

/// Moments are accumulated in one pass (Welford), extremes alongside.
pub fn timing_stats(samples: &[u64], rate_hz: f64) -> Result<TimingStats, ScoringError> {
    if samples.is_empty() {
        return Err(ScoringError::EmptySamples);
    }
    if rate_hz.is_nan() || rate_hz <= 0.0 {
        return Err(ScoringError::BadRate);
    }
    let mut mean = 0f64;
    let mut m2 = 0f64;
    let mut min = u64::MAX;
    let mut max = 0u64;
    for (i, &s) in samples.iter().enumerate() {
        let x = s as f64;
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
        min = min.min(s);
        max = max.max(s);
    }
    let count = samples.len() as u64;
    let std = (m2 / count as f64).max(0.0).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let rank = ((count as f64 * 0.99).ceil() as usize).clamp(1, sorted.len());
    let frame_budget_ns = 1e9 / rate_hz;
    Ok(TimingStats {
        count,
        mean_ns: mean,
        std_ns: std,
        min_ns: min,
        max_ns: max,
        p99_ns: sorted[rank - 1],
        frame_budget_ns,
        feasible: mean + 3.0 * std <= frame_budget_ns,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl MatchCounts {
    fn add(&mut self, other: MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// With nothing predicted, precision is 1 only if nothing was missed.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.fn_ == 0)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.fp == 0)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, true)
    }
}

fn ratio(num: u64, den: u64, empty_is_perfect: bool) -> f64 {
    if den == 0 {
        if empty_is_perfect {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassScore {
    pub counts: MatchCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<MatchCounts> for ClassScore {
    fn from(counts: MatchCounts) -> Self {
        ClassScore {
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyScore {
    pub schema: String,
    pub task: TaskKind,
    /// Name of the primary metric, e.g. `detection_f1@iou0.5`.
    pub metric: String,
    /// The primary metric value in `[0, 1]`.
    pub value: f64,
    pub overall: ClassScore,
    pub per_class: BTreeMap<u16, ClassScore>,
    pub frames_scored: u64,
    /// Results that referenced frames without ground truth; their
    /// detections count as false positives.
    pub unknown_frame_ids: Vec<u64>,
}

impl AccuracyScore {
    /// Placeholder for task kinds whose scorers are not implemented.
    pub fn unscored(task: TaskKind) -> Self {
        AccuracyScore {
            schema: SCORING_SCHEMA.to_string(),
            task,
            metric: "unscored".to_string(),
            value: 0.0,
            overall: MatchCounts::default().into(),
            per_class: BTreeMap::new(),
            frames_scored: 0,
            unknown_frame_ids: Vec::new(),
        }
    }
}

/// One frame's output from a plugin.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame_id: u64,
    pub detections: Vec<Detection>,
}

/// Greedy per-frame matching: detections in `(score desc, index asc)` order
/// each claim the unmatched same-class ground-truth box with the highest IoU
/// (lowest index on ties) if that IoU is at least [`IOU_THRESHOLD`].
pub fn match_frame(detections: &[Detection], truth: &[(u16, PixelBox)]) -> BTreeMap<u16, MatchCounts> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut claimed = vec![false; truth.len()];
    let mut counts: BTreeMap<u16, MatchCounts> = BTreeMap::new();
    for &d in &order {
        let det = &detections[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, (class, bbox)) in truth.iter().enumerate() {
            if claimed[g] || *class != det.class {
                continue;
            }
            let iou = det.bbox.iou(bbox);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        let entry = counts.entry(det.class).or_default();
        match best {
            Some((g, iou)) if iou >= IOU_THRESHOLD => {
                claimed[g] = true;
                entry.tp += 1;
            }
            _ => entry.fp += 1,
        }
    }
    for (g, (class, _)) in truth.iter().enumerate() {
        if !claimed[g] {
            counts.entry(*class).or_default().fn_ += 1;
        }
    }
    counts
}

/// Scores detections against native-resolution ground truth, projected into
/// preset coordinates through `geometry`.
pub fn score_detections(
    results: &[FrameDetections],
    ground_truth: &BTreeMap<u64, Vec<GroundTruthObject>>,
    geometry: &CropGeometry,
) -> AccuracyScore {
    let projected: BTreeMap<u64, Vec<(u16, PixelBox)>> = ground_truth
        .iter()
        .map(|(&frame_id, objects)| {
            let boxes = objects
                .iter()
                .filter_map(|o| geometry.project_pixel_box(o.bbox).map(|b| (o.class, b)))
                .collect();
            (frame_id, boxes)
        })
        .collect();
    score_projected(results, &projected)
}

/// Scores detections against ground truth already in output coordinates.
pub fn score_projected(
    results: &[FrameDetections],
    ground_truth: &BTreeMap<u64, Vec<(u16, PixelBox)>>,
) -> AccuracyScore {
    let mut per_class: BTreeMap<u16, MatchCounts> = BTreeMap::new();
    let mut unknown = BTreeSet::new();
    let mut frames_scored = 0;
    for frame in results {
        let Some(truth) = ground_truth.get(&frame.frame_id) else {
            unknown.insert(frame.frame_id);
            for det in &frame.detections {
                per_class.entry(det.class).or_default().fp += 1;
            }
            continue;
        };
        frames_scored += 1;
        for (class, counts) in match_frame(&frame.detections, truth) {
            per_class.entry(class).or_default().add(counts);
        }
    }
    let mut overall = MatchCounts::default();
    for counts in per_class.values() {
        overall.add(*counts);
    }
    AccuracyScore {
        schema: SCORING_SCHEMA.to_string(),
        task: TaskKind::Detection,
        metric: format!("detection_f1@iou{IOU_THRESHOLD}"),
        value: overall.f1(),
        overall: overall.into(),
        per_class: per_class.into_iter().map(|(c, m)| (c, m.into())).collect(),
        frames_scored,
        unknown_frame_ids: unknown.into_iter().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::cover_geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const MS: u64 = 1_000_000;

    fn pb(x: u32, y: u32, w: u32, h: u32) -> PixelBox {
        PixelBox { x, y, w, h }
    }

    fn det(class: u16, bbox: PixelBox, score: u16) -> Detection {
        Detection { class, bbox, score }
    }

    fn gt(object_id: u32, class: u16, bbox: PixelBox) -> GroundTruthObject {
        GroundTruthObject {
            object_id,
            class,
            bbox,
        }
    }

    #[test]
    fn constant_samples() {
        let s = timing_stats(&[10 * MS; 50], 30.0).unwrap();
        assert_eq!(s.mean_ns, 10e6);
        assert_eq!(s.std_ns, 0.0);
        assert!(s.feasible);
        assert!((s.frame_budget_ns - 33_333_333.333).abs() < 1e-3);
    }

    #[test]
    fn three_samples() {
        let s = timing_stats(&[10 * MS, 20 * MS, 30 * MS], 30.0).unwrap();
        assert!((s.mean_ns - 20e6).abs() < 1e-6);
        // sqrt(200/3) ms
        assert!((s.std_ns - 8_164_965.809).abs() < 1e-2);
        assert_eq!((s.min_ns, s.max_ns, s.p99_ns), (10 * MS, 30 * MS, 30 * MS));
    }

    #[test]
    fn feasibility_rule() {
        // mean 30 ms, population std 5 ms.
        let s = timing_stats(&[25 * MS, 35 * MS], 30.0).unwrap();
        assert!((s.std_ns - 5e6).abs() < 1e-6);
        assert!(!s.feasible);
        let s = timing_stats(&[16 * MS, 20 * MS], 30.0).unwrap();
        assert!(s.feasible);
    }

    #[test]
    fn empty_samples_rejected() {
        assert_eq!(timing_stats(&[], 30.0), Err(ScoringError::EmptySamples));
    }

    #[test]
    fn p99_nearest_rank() {
        let samples: Vec<u64> = (1..=200).collect();
        let s = timing_stats(&samples, 1.0).unwrap();
        assert_eq!(s.p99_ns, 198);
        assert!(s.min_ns as f64 <= s.mean_ns && s.mean_ns <= s.max_ns as f64);
    }

    #[test]
    fn one_pass_std_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<u64> = (0..1_000_000)
            .map(|_| rng.random_range(1_000_000u64..60_000_000))
            .collect();
        let s = timing_stats(&samples, 30.0).unwrap();
        let n = samples.len() as f64;
        let mean = samples.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = samples
            .iter()
            .map(|&x| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(((s.std_ns - var.sqrt()) / var.sqrt()).abs() < 1e-9);
        assert!(((s.mean_ns - mean) / mean).abs() < 1e-9);
    }

    fn two_box_truth() -> BTreeMap<u64, Vec<GroundTruthObject>> {
        BTreeMap::from([(
            1,
            vec![gt(0, 0, pb(10, 10, 50, 40)), gt(1, 1, pb(200, 100, 30, 30))],
        )])
    }

    #[test]
    fn perfect_results_score_one() {
        let truth = two_box_truth();
        let g = cover_geometry(640, 480, 640, 480);
        let results = vec![FrameDetections {
            frame_id: 1,
            detections: truth[&1]
                .iter()
                .map(|o| det(o.class, o.bbox, 65535))
                .collect(),
        }];
        let s = score_detections(&results, &truth, &g);
        assert_eq!(s.value, 1.0);
        assert_eq!(s.frames_scored, 1);
    }

    #[test]
    fn empty_results_score_zero() {
        let truth = two_box_truth();
        let g = cover_geometry(640, 480, 640, 480);
        let results = vec![FrameDetections {
            frame_id: 1,
            detections: vec![],
        }];
        let s = score_detections(&results, &truth, &g);
        assert_eq!(s.value, 0.0);
        assert_eq!(s.overall.recall, 0.0);
    }

    #[test]
    fn half_recall_gives_two_thirds() {
        let truth = two_box_truth();
        let g = cover_geometry(640, 480, 640, 480);
        let results = vec![FrameDetections {
            frame_id: 1,
            detections: vec![det(0, pb(10, 10, 50, 40), 40000)],
        }];
        let s = score_detections(&results, &truth, &g);
        assert_eq!(s.overall.precision, 1.0);
        assert_eq!(s.overall.recall, 0.5);
        assert!((s.value - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.per_class[&1].counts.fn_, 1);
    }

    #[test]
    fn unknown_frames_are_false_positives() {
        let truth = two_box_truth();
        let g = cover_geometry(640, 480, 640, 480);
        let results = vec![FrameDetections {
            frame_id: 99,
            detections: vec![det(0, pb(1, 1, 5, 5), 100)],
        }];
        let s = score_detections(&results, &truth, &g);
        assert_eq!(s.unknown_frame_ids, vec![99]);
        assert_eq!(s.overall.counts.fp, 1);
        assert_eq!(s.frames_scored, 0);
    }

    #[test]
    fn class_mismatch_does_not_match() {
        let truth = vec![(0u16, pb(0, 0, 10, 10))];
        let counts = match_frame(&[det(1, pb(0, 0, 10, 10), 9)], &truth);
        assert_eq!(counts[&1].fp, 1);
        assert_eq!(counts[&0].fn_, 1);
    }

    #[test]
    fn higher_score_claims_first() {
        let truth = vec![(0u16, pb(0, 0, 10, 10))];
        let low = det(0, pb(0, 0, 10, 10), 10);
        let high = det(0, pb(1, 0, 10, 10), 60000);
        let a = match_frame(&[low, high], &truth);
        let b = match_frame(&[high, low], &truth);
        assert_eq!(a, b);
        assert_eq!(a[&0], MatchCounts { tp: 1, fp: 1, fn_: 0 });
    }

    #[test]
    fn matching_is_order_invariant_with_distinct_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let truth: Vec<(u16, PixelBox)> = (0..6)
                .map(|_| {
                    (
                        rng.random_range(0..2),
                        pb(rng.random_range(0..80), rng.random_range(0..80), 20, 20),
                    )
                })
                .collect();
            let mut dets: Vec<Detection> = (0..8u16)
                .map(|i| {
                    det(
                        rng.random_range(0..2),
                        pb(rng.random_range(0..80), rng.random_range(0..80), 20, 20),
                        i * 1000 + 1,
                    )
                })
                .collect();
            let reference = match_frame(&dets, &truth);
            dets.reverse();
            assert_eq!(match_frame(&dets, &truth), reference);
            dets.rotate_left(3);
            assert_eq!(match_frame(&dets, &truth), reference);
        }
    }

    #[test]
    fn identity_geometry_equals_pretransformed() {
        let truth = two_box_truth();
        let g = cover_geometry(640, 480, 640, 480);
        let pre: BTreeMap<u64, Vec<(u16, PixelBox)>> = truth
            .iter()
            .map(|(&f, objs)| (f, objs.iter().map(|o| (o.class, o.bbox)).collect()))
            .collect();
        let results = vec![FrameDetections {
            frame_id: 1,
            detections: vec![det(1, pb(200, 100, 30, 28), 5), det(0, pb(300, 300, 5, 5), 7)],
        }];
        assert_eq!(
            score_detections(&results, &truth, &g),
            score_projected(&results, &pre)
        );
    }
}
