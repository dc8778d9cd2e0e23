//! Tracking metrics, Pareto-front computation, and exit/difficulty reports.

use std::collections::BTreeMap;

use crate::data::types::Attribute;
use crate::error::{DytxError, Result};
use crate::inference::TrackResult;

/// Continuous success AUC: area under the success-rate curve over overlap
/// thresholds, which reduces exactly to 100 × mean IoU.
pub fn success_auc(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(DytxError::Contract("success_auc needs at least one IoU".into()));
    }
    Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
}

/// 21-point sampled success AUC (thresholds 0.00, 0.05, …, 1.00), the
/// benchmark-style approximation of the continuous value.
pub fn success_auc_sampled(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(DytxError::Contract("success_auc needs at least one IoU".into()));
    }
    let n = ious.len() as f64;
    let mut acc = 0.0;
    for i in 0..=20 {
        let thr = i as f64 * 0.05;
        let success = ious.iter().filter(|&&v| v > thr).count() as f64 / n;
        acc += success;
    }
    Ok(100.0 * acc / 21.0)
}

/// Fraction of frames whose center error is within the threshold. The
/// conventional 20px threshold is scaled by frame_size/1000 to stay
/// proportionate at desk scale (e.g. 2.56px on 128px frames).
pub fn precision_at(center_errors: &[f64], frame_size: f64) -> Result<f64> {
    if center_errors.is_empty() {
        return Err(DytxError::Contract("precision needs at least one frame".into()));
    }
    let threshold = 20.0 * frame_size / 1000.0;
    let hit = center_errors.iter().filter(|&&e| e <= threshold).count();
    Ok(100.0 * hit as f64 / center_errors.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffPoint {
    /// Frames per second, higher is better.
    pub speed: f64,
    /// Metric value in [0, 100], higher is better.
    pub precision: f64,
    pub label: String,
}

impl TradeoffPoint {
    pub fn new(speed: f64, precision: f64, label: impl Into<String>) -> Self {
        TradeoffPoint {
            speed,
            precision,
            label: label.into(),
        }
    }

    fn dominates(&self, other: &TradeoffPoint) -> bool {
        self.speed >= other.speed
            && self.precision >= other.precision
            && (self.speed > other.speed || self.precision > other.precision)
    }
}

/// All points not dominated by any other, sorted by descending speed.
/// Exact duplicates are retained (neither strictly dominates the other).
pub fn pareto_front(points: &[TradeoffPoint]) -> Vec<TradeoffPoint> {
    let mut front: Vec<TradeoffPoint> = points
        .iter()
        .filter(|p| !points.iter().any(|q| q.dominates(p)))
        .cloned()
        .collect();
    front.sort_by(|a, b| b.speed.partial_cmp(&a.speed).unwrap());
    front
}

/// Exact two-sided sign test p-value for n trials with `wins` successes
/// under p = 0.5.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let ln_choose = |n: usize, k: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..k {
            acc += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        }
        acc
    };
    let tail = |from: usize| -> f64 {
        (from..=n)
            .map(|k| (ln_choose(n, k) - (n as f64) * std::f64::consts::LN_2).exp())
            .sum::<f64>()
    };
    let extreme = wins.max(n - wins);
    (2.0 * tail(extreme)).min(1.0)
}

#[derive(Debug, Clone)]
pub struct ExitDepthRow {
    pub exit_index: usize,
    pub frames: usize,
    pub mean_iou: f64,
}

#[derive(Debug, Clone)]
pub struct ExitDepthReport {
    pub rows: Vec<ExitDepthRow>,
    /// Mean realized exit index per attribute.
    pub attribute_depth: Vec<(Attribute, f64)>,
}

/// Mean IoU grouped by realized exit index, plus per-attribute mean depth.
pub fn exit_depth_report(
    results: &[TrackResult],
    attributes: &[(String, Vec<Attribute>)],
) -> ExitDepthReport {
    let mut by_exit: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    let mut by_attr: BTreeMap<Attribute, (usize, f64)> = BTreeMap::new();
    for r in results {
        let attrs = attributes
            .iter()
            .find(|(n, _)| *n == r.seq_name)
            .map(|(_, a)| a.as_slice())
            .unwrap_or(&[]);
        for (rec, gt) in r.records.iter().zip(&r.gt) {
            let e = by_exit.entry(rec.exit_index).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += rec.bbox.iou(gt);
            for a in attrs {
                let s = by_attr.entry(*a).or_insert((0, 0.0));
                s.0 += 1;
                s.1 += rec.exit_index as f64;
            }
        }
    }
    ExitDepthReport {
        rows: by_exit
            .into_iter()
            .map(|(exit_index, (frames, iou))| ExitDepthRow {
                exit_index,
                frames,
                mean_iou: iou / frames as f64,
            })
            .collect(),
        attribute_depth: by_attr
            .into_iter()
            .map(|(a, (n, d))| (a, d / n as f64))
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct DifficultyRow {
    pub level: u8,
    pub frames: usize,
    /// Mean IoU per fixed-exit model, index = exit.
    pub mean_iou_per_exit: Vec<f64>,
    /// mean_iou_per_exit[k] − mean_iou_per_exit[0].
    pub gain_over_first: Vec<f64>,
}

/// Per (exit model, difficulty level) mean-IoU matrix. `runs[k]` holds the
/// fixed-exit-k results over the same sequences. Empty levels are omitted.
pub fn difficulty_report(runs: &[Vec<TrackResult>]) -> Result<Vec<DifficultyRow>> {
    if runs.is_empty() {
        return Err(DytxError::Contract("difficulty report needs runs".into()));
    }
    let mut levels: BTreeMap<u8, Vec<(usize, f64)>> = BTreeMap::new();
    for (k, run) in runs.iter().enumerate() {
        for r in run {
            let slot = levels
                .entry(r.difficulty)
                .or_insert_with(|| vec![(0, 0.0); runs.len()]);
            for (rec, gt) in r.records.iter().zip(&r.gt) {
                slot[k].0 += 1;
                slot[k].1 += rec.bbox.iou(gt);
            }
        }
    }
    Ok(levels
        .into_iter()
        .filter(|(_, slots)| slots.iter().all(|(n, _)| *n > 0))
        .map(|(level, slots)| {
            let mean: Vec<f64> = slots.iter().map(|(n, s)| s / *n as f64).collect();
            DifficultyRow {
                level,
                frames: slots[0].0,
                gain_over_first: mean.iter().map(|m| m - mean[0]).collect(),
                mean_iou_per_exit: mean,
            }
        })
        .collect())
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len()) as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomState;

    #[test]
    fn auc_examples() {
        assert!((success_auc(&[1.0, 0.0]).unwrap() - 50.0).abs() < 1e-9);
        assert!((success_auc(&[1.0; 5]).unwrap() - 100.0).abs() < 1e-9);
        assert!(success_auc(&[]).is_err());
    }

    #[test]
    fn continuous_auc_is_mean_iou_identity() {
        let mut rng = RandomState::new(3);
        let ious: Vec<f64> = (0..50).map(|_| rng.uniform()).collect();
        let mean = ious.iter().sum::<f64>() / 50.0;
        assert!((success_auc(&ious).unwrap() - 100.0 * mean).abs() < 1e-9);
    }

    #[test]
    fn sampled_auc_close_to_continuous() {
        let mut rng = RandomState::new(4);
        let ious: Vec<f64> = (0..500).map(|_| rng.uniform()).collect();
        let c = success_auc(&ious).unwrap();
        let s = success_auc_sampled(&ious).unwrap();
        assert!((c - s).abs() < 2.5, "continuous {c} vs sampled {s}");
    }

    #[test]
    fn precision_fractions() {
        // threshold on a 128px frame is 2.56px
        assert_eq!(precision_at(&[0.0, 0.0], 128.0).unwrap(), 100.0);
        assert_eq!(precision_at(&[50.0, 9.0], 128.0).unwrap(), 0.0);
        assert_eq!(precision_at(&[1.0, 9.0], 128.0).unwrap(), 50.0);
    }

    #[test]
    fn pareto_paper_table_values() {
        let pts = vec![
            TradeoffPoint::new(256.0, 64.9, "a"),
            TradeoffPoint::new(196.0, 66.5, "b"),
            TradeoffPoint::new(90.0, 69.2, "c"),
            TradeoffPoint::new(63.0, 64.9, "d"),
        ];
        let front = pareto_front(&pts);
        let labels: Vec<&str> = front.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels, vec!["a", "b", "c"]);
    }

    #[test]
    fn pareto_duplicates_retained_and_idempotent() {
        let pts = vec![
            TradeoffPoint::new(10.0, 50.0, "x"),
            TradeoffPoint::new(10.0, 50.0, "y"),
            TradeoffPoint::new(5.0, 40.0, "z"),
        ];
        let front = pareto_front(&pts);
        assert_eq!(front.len(), 2);
        let again = pareto_front(&front);
        assert_eq!(again, front);
    }

    #[test]
    fn pareto_matches_brute_force_oracle() {
        let mut rng = RandomState::new(11);
        for trial in 0..5 {
            let pts: Vec<TradeoffPoint> = (0..200)
                .map(|i| {
                    TradeoffPoint::new(
                        rng.uniform_in(1.0, 100.0),
                        rng.uniform_in(0.0, 100.0),
                        format!("p{trial}_{i}"),
                    )
                })
                .collect();
            let mut oracle: Vec<&TradeoffPoint> = pts
                .iter()
                .filter(|p| !pts.iter().any(|q| q.dominates(p)))
                .collect();
            oracle.sort_by(|a, b| b.speed.partial_cmp(&a.speed).unwrap());
            let front = pareto_front(&pts);
            assert_eq!(front.len(), oracle.len());
            for (a, b) in front.iter().zip(oracle) {
                assert_eq!(a.label, b.label);
            }
        }
    }

    #[test]
    fn sign_test_values() {
        // 10/10 wins: p = 2 × (1/2)^10 ≈ 0.00195
        assert!((sign_test_p(10, 10) - 2.0 / 1024.0).abs() < 1e-9);
        // 5/10: dead even, p = 1 (clamped)
        assert!(sign_test_p(5, 10) > 0.95);
        assert!(sign_test_p(9, 10) < 0.05);
    }

    fn fake_result(name: &str, difficulty: u8, data: &[(usize, f64)]) -> TrackResult {
        use crate::data::types::BoundingBox;
        use crate::inference::FrameRecord;
        let mut records = Vec::new();
        let mut gt = Vec::new();
        for (i, (exit, iou)) in data.iter().enumerate() {
            // gt is the unit box at origin scaled so predicted iou is exact:
            // use identical boxes shrunk by the target IoU along one axis
            let g = BoundingBox::new(10.0, 10.0, 4.0, 4.0);
            let p = BoundingBox::new(10.0, 10.0, 4.0 * iou, 4.0);
            records.push(FrameRecord {
                frame: i + 1,
                bbox: p,
                exit_index: *exit,
                score: 0.5,
                scores: vec![0.5],
                latency_ms: 1.0,
                flops: 1,
                reset: false,
            });
            gt.push(g);
        }
        TrackResult {
            seq_name: name.to_string(),
            difficulty,
            records,
            gt,
        }
    }

    #[test]
    fn exit_depth_groups_partition_frames() {
        let r = fake_result("s1", 1, &[(0, 1.0), (0, 0.5), (2, 1.0)]);
        let report = exit_depth_report(
            &[r],
            &[("s1".to_string(), vec![Attribute::Occlusion])],
        );
        let total: usize = report.rows.iter().map(|row| row.frames).sum();
        assert_eq!(total, 3);
        assert_eq!(report.rows[0].exit_index, 0);
        assert_eq!(report.rows[0].frames, 2);
        let (_, depth) = report.attribute_depth[0];
        assert!((depth - (0.0 + 0.0 + 2.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn difficulty_matrix_gains() {
        let runs = vec![
            vec![fake_result("a", 0, &[(0, 0.8)]), fake_result("b", 4, &[(0, 0.4)])],
            vec![fake_result("a", 0, &[(2, 0.85)]), fake_result("b", 4, &[(2, 0.7)])],
        ];
        let rows = difficulty_report(&runs).unwrap();
        assert_eq!(rows.len(), 2);
        let easy = &rows[0];
        let hard = &rows[1];
        assert!(hard.gain_over_first[1] > easy.gain_over_first[1]);
    }

    #[test]
    fn pearson_basics() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [2.0, 4.0, 6.0, 8.0];
        assert!((pearson(&xs, &ys) - 1.0).abs() < 1e-12);
        let yneg = [8.0, 6.0, 4.0, 2.0];
        assert!((pearson(&xs, &yneg) + 1.0).abs() < 1e-12);
    }
}
