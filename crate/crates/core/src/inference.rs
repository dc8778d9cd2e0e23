//! Exit policies, threshold calibration, and the per-frame tracking loop.

use std::time::Instant;

use crate::data::crop::{crop_region, CropWindow, SEARCH_FACTOR, TEMPLATE_FACTOR};
use crate::data::types::{BoundingBox, Sequence};
use crate::error::{DytxError, Result};
use crate::model::Model;
use crate::rng::RandomState;
use crate::tape::Tape;
use crate::Tensor32;

#[derive(Debug, Clone, PartialEq)]
pub enum ExitPolicy {
    /// Exit at the earliest k with s_k > τ_k; the final exit is unconditional.
    Adaptive { tau: Vec<f64> },
    /// Always exit at branch `k` (0-based).
    Fixed(usize),
    /// Draw the exit per frame from a fixed distribution over branches.
    Random { probs: Vec<f64> },
}

impl ExitPolicy {
    pub fn validate(&self, num_exits: usize) -> Result<()> {
        match self {
            ExitPolicy::Adaptive { tau } => {
                if tau.len() != num_exits - 1 {
                    return Err(DytxError::Config(format!(
                        "adaptive policy needs {} thresholds, got {}",
                        num_exits - 1,
                        tau.len()
                    )));
                }
                // Out-of-range thresholds are legal and useful: τ > 1 can
                // never be exceeded by a sigmoid score (always runs to the
                // final exit) and τ < 0 always accepts the first exit.
                for t in tau {
                    if !t.is_finite() {
                        return Err(DytxError::Config(format!("threshold {t} is not finite")));
                    }
                }
            }
            ExitPolicy::Fixed(k) => {
                if *k >= num_exits {
                    return Err(DytxError::Config(format!(
                        "fixed exit {k} out of range (0..{num_exits})"
                    )));
                }
            }
            ExitPolicy::Random { probs } => {
                if probs.len() != num_exits {
                    return Err(DytxError::Config(format!(
                        "random policy needs {num_exits} probabilities, got {}",
                        probs.len()
                    )));
                }
                let sum: f64 = probs.iter().sum();
                if probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
                    return Err(DytxError::Config(
                        "exit distribution must be non-negative and sum to 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Earliest-exit rule: exit at k iff s_k strictly exceeds τ_k; the final
/// exit always accepts.
pub fn select_exit(k: usize, score: f64, tau: &[f64], num_exits: usize) -> bool {
    if k + 1 == num_exits {
        return true;
    }
    score > tau[k]
}

#[derive(Debug, Clone)]
pub struct FrameRecord {
    /// Frame index within the sequence (≥ 1, the template frame has none).
    pub frame: usize,
    /// Predicted box in frame pixel coordinates.
    pub bbox: BoundingBox,
    pub exit_index: usize,
    pub score: f64,
    /// Scores of every evaluated exit (length exit_index + 1).
    pub scores: Vec<f64>,
    pub latency_ms: f64,
    pub flops: u64,
    /// Set when the previous prediction was degenerate and the search crop
    /// was reset to the last valid box.
    pub reset: bool,
}

#[derive(Debug, Clone)]
pub struct TrackResult {
    pub seq_name: String,
    pub difficulty: u8,
    pub records: Vec<FrameRecord>,
    /// Ground-truth boxes aligned with `records`.
    pub gt: Vec<BoundingBox>,
}

impl TrackResult {
    pub fn mean_iou(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records
            .iter()
            .zip(&self.gt)
            .map(|(r, g)| r.bbox.iou(g))
            .sum::<f64>()
            / self.records.len() as f64
    }

    pub fn mean_flops(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.flops as f64).sum::<f64>() / self.records.len() as f64
    }

    /// Median per-frame latency after up to 20 warmup frames.
    pub fn median_latency_ms(&self) -> f64 {
        let skip = self.records.len().min(20) * usize::from(self.records.len() > 40);
        let mut l: Vec<f64> = self.records[skip..].iter().map(|r| r.latency_ms).collect();
        if l.is_empty() {
            l = self.records.iter().map(|r| r.latency_ms).collect();
        }
        l.sort_by(|a, b| a.partial_cmp(b).unwrap());
        l[l.len() / 2]
    }
}

fn degenerate(b: &BoundingBox) -> bool {
    !(b.cx.is_finite() && b.cy.is_finite() && b.w.is_finite() && b.h.is_finite())
        || b.w * b.h < 1e-6
}

fn template_crop(seq: &Sequence, size: usize) -> (Tensor32, CropWindow) {
    let f = &seq.frames[0];
    let b = &f.gt_box;
    let side = (TEMPLATE_FACTOR * TEMPLATE_FACTOR * b.w * b.h).sqrt().max(4.0);
    crop_region(f, b.cx, b.cy, side, size)
}

/// Track a sequence from its first-frame ground truth.
pub fn track_sequence(
    model: &Model<f32>,
    seq: &Sequence,
    policy: &ExitPolicy,
    rng: &mut RandomState,
) -> Result<TrackResult> {
    let k_exits = model.num_exits();
    policy.validate(k_exits)?;
    if seq.frames.len() < 2 {
        return Err(DytxError::Contract("sequence needs ≥ 2 frames".into()));
    }
    let cfg = model.cfg().clone();
    let (template, _) = template_crop(seq, cfg.template_size);

    let mut prev_box = seq.frames[0].gt_box;
    let mut last_valid = prev_box;
    let mut records = Vec::new();
    let mut gt = Vec::new();

    for t in 1..seq.frames.len() {
        let start = Instant::now();
        let mut reset = false;
        if degenerate(&prev_box) {
            prev_box = last_valid;
            reset = true;
        }
        let frame = &seq.frames[t];
        let side = (SEARCH_FACTOR * SEARCH_FACTOR * prev_box.w * prev_box.h)
            .sqrt()
            .max(4.0);
        let (search, win) = crop_region(frame, prev_box.cx, prev_box.cy, side, cfg.search_size);

        let target_exit = match policy {
            ExitPolicy::Fixed(k) => Some(*k),
            ExitPolicy::Random { probs } => {
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut chosen = k_exits - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                Some(chosen)
            }
            ExitPolicy::Adaptive { .. } => None,
        };

        let tape = Tape::new();
        model.bind(&tape, &|_| false);
        let mut state = model.begin_inference(&tape, &template, &search)?;
        let mut scores = Vec::new();
        let mut accepted = None;
        for k in 0..k_exits {
            let outcome = model.advance_to_exit(&tape, &mut state, false)?;
            scores.push(outcome.score);
            let take = match (policy, target_exit) {
                (ExitPolicy::Adaptive { tau }, _) => select_exit(k, outcome.score, tau, k_exits),
                (_, Some(te)) => k == te,
                _ => unreachable!(),
            };
            if take {
                accepted = Some(outcome);
                break;
            }
        }
        let mut outcome = accepted.expect("final exit accepts unconditionally");
        model.attach_box(&tape, &mut outcome)?;

        let frame_box = win.box_to_frame(&outcome.bbox);
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        records.push(FrameRecord {
            frame: t,
            bbox: frame_box,
            exit_index: outcome.exit_index,
            score: outcome.score,
            scores,
            latency_ms,
            flops: outcome.flops_so_far,
            reset,
        });
        gt.push(frame.gt_box);

        prev_box = frame_box;
        if !degenerate(&frame_box) {
            last_valid = frame_box;
        }
    }

    Ok(TrackResult {
        seq_name: seq.name.clone(),
        difficulty: seq.difficulty,
        records,
        gt,
    })
}

/// One calibration row: thresholds with measured cost/quality.
#[derive(Debug, Clone)]
pub struct CalibrationRow {
    pub tau: Vec<f64>,
    pub mean_latency_ms: f64,
    pub mean_iou: f64,
    pub mean_flops: f64,
}

fn eval_tau(
    model: &Model<f32>,
    seqs: &[Sequence],
    tau: &[f64],
    rng: &mut RandomState,
) -> Result<CalibrationRow> {
    let policy = ExitPolicy::Adaptive { tau: tau.to_vec() };
    let mut iou = 0.0;
    let mut lat = 0.0;
    let mut fl = 0.0;
    for s in seqs {
        let r = track_sequence(model, s, &policy, rng)?;
        iou += r.mean_iou();
        lat += r.median_latency_ms();
        fl += r.mean_flops();
    }
    let n = seqs.len() as f64;
    Ok(CalibrationRow {
        tau: tau.to_vec(),
        mean_latency_ms: lat / n,
        mean_iou: iou / n,
        mean_flops: fl / n,
    })
}

/// Sweep a scalar τ grid {0.0, 0.05, …, 1.0} broadcast to all K−1 slots,
/// then refine each slot by ±0.025 around the best scalar. Rows are sorted
/// by mean latency, ascending.
pub fn calibrate(
    model: &Model<f32>,
    val: &[Sequence],
    rng: &mut RandomState,
) -> Result<Vec<CalibrationRow>> {
    if val.is_empty() {
        return Err(DytxError::Contract("calibration needs a validation set".into()));
    }
    let slots = model.num_exits() - 1;
    let mut rows = Vec::new();
    for i in 0..=20 {
        let t = i as f64 * 0.05;
        rows.push(eval_tau(model, val, &vec![t; slots], rng)?);
    }
    let best = rows
        .iter()
        .max_by(|a, b| {
            // prefer quality, break ties toward lower latency
            (a.mean_iou, -a.mean_latency_ms)
                .partial_cmp(&(b.mean_iou, -b.mean_latency_ms))
                .unwrap()
        })
        .map(|r| r.tau.clone())
        .unwrap();
    for slot in 0..slots {
        for delta in [-0.025, 0.025] {
            let mut tau = best.clone();
            tau[slot] = (tau[slot] + delta).clamp(0.0, 1.0);
            rows.push(eval_tau(model, val, &tau, rng)?);
        }
    }
    rows.sort_by(|a, b| a.mean_latency_ms.partial_cmp(&b.mean_latency_ms).unwrap());
    Ok(rows)
}

/// Random policy whose exit distribution matches an adaptive run's
/// empirical exit frequencies, so expected compute matches.
pub fn match_cost_random_policy(results: &[TrackResult], num_exits: usize) -> ExitPolicy {
    let mut counts = vec![0usize; num_exits];
    let mut total = 0usize;
    for r in results {
        for rec in &r.records {
            counts[rec.exit_index] += 1;
            total += 1;
        }
    }
    let probs = if total == 0 {
        let mut p = vec![0.0; num_exits];
        p[num_exits - 1] = 1.0;
        p
    } else {
        counts.iter().map(|c| *c as f64 / total as f64).collect()
    };
    ExitPolicy::Random { probs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::generate::{generate_sequence, GenConfig};
    use crate::model::ExitsConfig;

    fn toy_model(seed: u64) -> Model<f32> {
        let mut rng = RandomState::new(seed);
        Model::init(&BackboneConfig::default(), &ExitsConfig::default(), &mut rng).unwrap()
    }

    fn toy_seq(seed: u64) -> Sequence {
        let cfg = GenConfig {
            length: 6,
            ..GenConfig::for_difficulty(1)
        };
        generate_sequence(&cfg, &mut RandomState::new(seed)).unwrap()
    }

    #[test]
    fn select_exit_rule_examples() {
        let tau = [0.5, 0.5];
        assert!(select_exit(0, 0.7, &tau, 3));
        assert!(!select_exit(0, 0.3, &tau, 3));
        assert!(select_exit(1, 0.6, &tau, 3));
        // forced final exit regardless of score
        assert!(select_exit(2, 0.1, &tau, 3));
        // strict inequality: a tie continues
        assert!(!select_exit(0, 0.5, &tau, 3));
    }

    #[test]
    fn threshold_extremes_match_fixed_policies() {
        let model = toy_model(1);
        let seq = toy_seq(2);
        let mut rng = RandomState::new(0);
        let hi = track_sequence(&model, &seq, &ExitPolicy::Adaptive { tau: vec![1.0, 1.0] }, &mut rng)
            .unwrap();
        let fixed_last =
            track_sequence(&model, &seq, &ExitPolicy::Fixed(2), &mut rng).unwrap();
        for (a, b) in hi.records.iter().zip(&fixed_last.records) {
            assert_eq!(a.exit_index, 2);
            assert_eq!(format!("{:?}", a.bbox), format!("{:?}", b.bbox));
        }
        let lo = track_sequence(&model, &seq, &ExitPolicy::Adaptive { tau: vec![0.0, 0.0] }, &mut rng)
            .unwrap();
        let fixed_first =
            track_sequence(&model, &seq, &ExitPolicy::Fixed(0), &mut rng).unwrap();
        for (a, b) in lo.records.iter().zip(&fixed_first.records) {
            // scores are sigmoid outputs, strictly above 0
            assert_eq!(a.exit_index, 0);
            assert_eq!(format!("{:?}", a.bbox), format!("{:?}", b.bbox));
        }
    }

    #[test]
    fn deterministic_tracking() {
        let model = toy_model(3);
        let seq = toy_seq(4);
        let policy = ExitPolicy::Adaptive { tau: vec![0.5, 0.5] };
        let a = track_sequence(&model, &seq, &policy, &mut RandomState::new(7)).unwrap();
        let b = track_sequence(&model, &seq, &policy, &mut RandomState::new(7)).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(format!("{:?}", x.bbox), format!("{:?}", y.bbox));
            assert_eq!(x.exit_index, y.exit_index);
            assert_eq!(x.flops, y.flops);
        }
    }

    #[test]
    fn earliest_exit_is_minimal_over_recorded_scores() {
        let model = toy_model(5);
        let seq = toy_seq(6);
        let tau = vec![0.4, 0.6];
        let r = track_sequence(
            &model,
            &seq,
            &ExitPolicy::Adaptive { tau: tau.clone() },
            &mut RandomState::new(0),
        )
        .unwrap();
        for rec in &r.records {
            for (k, s) in rec.scores.iter().enumerate() {
                let exits = select_exit(k, *s, &tau, 3);
                if k < rec.exit_index {
                    assert!(!exits, "should have exited earlier");
                } else {
                    assert!(exits);
                    break;
                }
            }
        }
    }

    #[test]
    fn raising_thresholds_never_lowers_exit_depth() {
        let model = toy_model(8);
        let seq = toy_seq(9);
        // evaluate per-frame against recorded scores: monotone in each τ_k
        let r = track_sequence(
            &model,
            &seq,
            &ExitPolicy::Fixed(2),
            &mut RandomState::new(0),
        )
        .unwrap();
        let realized = |tau: &[f64], scores: &[f64]| -> usize {
            for (k, s) in scores.iter().enumerate() {
                if select_exit(k, *s, tau, 3) {
                    return k;
                }
            }
            2
        };
        for rec in &r.records {
            for t0 in [0.0, 0.3, 0.6, 0.9] {
                for t1 in [0.0, 0.3, 0.6, 0.9] {
                    let base = realized(&[t0, t1], &rec.scores);
                    let up0 = realized(&[t0 + 0.1, t1], &rec.scores);
                    let up1 = realized(&[t0, t1 + 0.1], &rec.scores);
                    assert!(up0 >= base && up1 >= base);
                }
            }
        }
    }

    #[test]
    fn matched_random_policy_reproduces_distribution() {
        let model = toy_model(10);
        let seqs: Vec<Sequence> = (0..3).map(|i| toy_seq(20 + i)).collect();
        let policy = ExitPolicy::Adaptive { tau: vec![0.45, 0.45] };
        let mut rng = RandomState::new(1);
        let results: Vec<TrackResult> = seqs
            .iter()
            .map(|s| track_sequence(&model, s, &policy, &mut rng).unwrap())
            .collect();
        let random = match_cost_random_policy(&results, 3);
        let ExitPolicy::Random { probs } = &random else {
            panic!()
        };
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // degenerate case: everything exits at K
        let all_last = match_cost_random_policy(
            &[TrackResult {
                seq_name: "x".into(),
                difficulty: 0,
                records: vec![],
                gt: vec![],
            }],
            3,
        );
        assert_eq!(
            all_last,
            ExitPolicy::Random {
                probs: vec![0.0, 0.0, 1.0]
            }
        );
    }

    #[test]
    fn policy_validation() {
        assert!(ExitPolicy::Adaptive { tau: vec![0.5] }.validate(3).is_err());
        assert!(ExitPolicy::Adaptive { tau: vec![0.5, 1.5] }.validate(3).is_err());
        assert!(ExitPolicy::Fixed(3).validate(3).is_err());
        assert!(ExitPolicy::Random { probs: vec![0.5, 0.5] }.validate(3).is_err());
        assert!(ExitPolicy::Random {
            probs: vec![0.2, 0.3, 0.5]
        }
        .validate(3)
        .is_ok());
    }
}
