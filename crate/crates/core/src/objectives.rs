//! Loss functions and the optimizer used by the two-stage training procedure.

use std::collections::HashMap;

use crate::data::crop::crop_pair;
use crate::data::types::{BoundingBox, SamplePair, Sequence};
use crate::distill;
use crate::error::{DytxError, Result};
use crate::exits::BoxVars;
use crate::model::{DistillMode, Model, TrainForward};
use crate::nn::ParamSet;
use crate::rng::RandomState;
use crate::scalar::Scalar;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// L1 weight (λ1).
    pub l1: f64,
    /// GIoU weight (λG).
    pub giou: f64,
    /// Score weight (λs).
    pub score: f64,
    /// Imitation weight (λm).
    pub imit: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 5.0,
            giou: 2.0,
            score: 5.0,
            imit: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l1", self.l1),
            ("giou", self.giou),
            ("score", self.score),
            ("imit", self.imit),
        ] {
            if !(v >= 0.0) {
                return Err(DytxError::Config(format!(
                    "loss weight {name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn konst<T: Scalar>(tape: &Tape<T>, v: f64) -> VarId {
    tape.constant(Tensor::scalar(T::of_f64(v)))
}

/// Predicted box corners from the center-form tape variables.
fn pred_corners<T: Scalar>(
    tape: &Tape<T>,
    pred: &BoxVars,
) -> Result<(VarId, VarId, VarId, VarId)> {
    let half_w = tape.scale(pred.w, T::of_f64(0.5));
    let half_h = tape.scale(pred.h, T::of_f64(0.5));
    let px1 = tape.sub(pred.cx, half_w)?;
    let px2 = tape.add(pred.cx, half_w)?;
    let py1 = tape.sub(pred.cy, half_h)?;
    let py2 = tape.add(pred.cy, half_h)?;
    Ok((px1, py1, px2, py2))
}

/// Intersection and union areas against a constant ground-truth box.
fn inter_union<T: Scalar>(
    tape: &Tape<T>,
    pred: &BoxVars,
    corners: (VarId, VarId, VarId, VarId),
    gt: &BoundingBox,
) -> Result<(VarId, VarId)> {
    let (px1, py1, px2, py2) = corners;
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let zero = konst(tape, 0.0);
    let ix1 = tape.max_const(px1, T::of_f64(gx1));
    let iy1 = tape.max_const(py1, T::of_f64(gy1));
    let ix2 = tape.min_const(px2, T::of_f64(gx2));
    let iy2 = tape.min_const(py2, T::of_f64(gy2));
    let iw = tape.max_elem(tape.sub(ix2, ix1)?, zero)?;
    let ih = tape.max_elem(tape.sub(iy2, iy1)?, zero)?;
    let inter = tape.mul(iw, ih)?;
    let area_p = tape.mul(pred.w, pred.h)?;
    let area_g = konst(tape, gt.area());
    let union = tape.sub(tape.add(area_p, area_g)?, inter)?;
    let union = tape.max_const(union, T::of_f64(1e-12));
    Ok((inter, union))
}

/// Differentiable IoU between a predicted box (tape variables, center form)
/// and a ground-truth box.
pub fn iou_var<T: Scalar>(tape: &Tape<T>, pred: &BoxVars, gt: &BoundingBox) -> Result<VarId> {
    let corners = pred_corners(tape, pred)?;
    let (inter, union) = inter_union(tape, pred, corners, gt)?;
    tape.div(inter, union)
}

/// 1 − GIoU, differentiable through the predicted coordinates.
pub fn giou_loss_var<T: Scalar>(
    tape: &Tape<T>,
    pred: &BoxVars,
    gt: &BoundingBox,
) -> Result<VarId> {
    let corners = pred_corners(tape, pred)?;
    let (px1, py1, px2, py2) = corners;
    let (inter, union) = inter_union(tape, pred, corners, gt)?;
    let iou = tape.div(inter, union)?;

    // smallest enclosing box
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let cx1 = tape.min_const(px1, T::of_f64(gx1));
    let cy1 = tape.min_const(py1, T::of_f64(gy1));
    let cx2 = tape.max_const(px2, T::of_f64(gx2));
    let cy2 = tape.max_const(py2, T::of_f64(gy2));
    let cw = tape.sub(cx2, cx1)?;
    let ch = tape.sub(cy2, cy1)?;
    let c_area = tape.max_const(tape.mul(cw, ch)?, T::of_f64(1e-12));
    let gap = tape.div(tape.sub(c_area, union)?, c_area)?;
    let giou = tape.sub(iou, gap)?;
    tape.sub(konst(tape, 1.0), giou)
}

/// Sum of absolute coordinate differences over (cx, cy, w, h).
pub fn l1_var<T: Scalar>(tape: &Tape<T>, pred: &BoxVars, gt: &BoundingBox) -> Result<VarId> {
    let terms = [
        (pred.cx, gt.cx),
        (pred.cy, gt.cy),
        (pred.w, gt.w),
        (pred.h, gt.h),
    ];
    let mut acc = konst(tape, 0.0);
    for (p, g) in terms {
        let d = tape.abs(tape.sub(p, konst(tape, g))?);
        acc = tape.add(acc, d)?;
    }
    Ok(acc)
}

/// λ1·L1 + λG·(1 − GIoU).
pub fn locate_loss_var<T: Scalar>(
    tape: &Tape<T>,
    pred: &BoxVars,
    gt: &BoundingBox,
    w: &LossWeights,
) -> Result<VarId> {
    let l1 = l1_var(tape, pred, gt)?;
    let g = giou_loss_var(tape, pred, gt)?;
    tape.add(
        tape.scale(l1, T::of_f64(w.l1)),
        tape.scale(g, T::of_f64(w.giou)),
    )
}

/// (s − target)² with a constant (detached) target.
pub fn score_loss_var<T: Scalar>(tape: &Tape<T>, score: VarId, target_iou: f64) -> Result<VarId> {
    let d = tape.sub(score, konst(tape, target_iou))?;
    tape.mul(d, d)
}

/// Full joint objective over a training forward pass.
///
/// Per-exit locate and score terms are averaged over exits; the imitation
/// term is added with weight λm.
pub fn joint_loss<T: Scalar>(
    tape: &Tape<T>,
    fwd: &TrainForward,
    gt: &BoundingBox,
    w: &LossWeights,
) -> Result<VarId> {
    joint_loss_over(tape, fwd, gt, w, None)
}

/// Joint loss restricted to the exits in `mask` (by exit index); `None`
/// includes every exit in the forward pass.
pub fn joint_loss_over<T: Scalar>(
    tape: &Tape<T>,
    fwd: &TrainForward,
    gt: &BoundingBox,
    w: &LossWeights,
    mask: Option<&[usize]>,
) -> Result<VarId> {
    let included: Vec<_> = fwd
        .outcomes
        .iter()
        .filter(|o| mask.map_or(true, |m| m.contains(&o.exit_index)))
        .collect();
    let k = included.len();
    if k == 0 {
        return Err(DytxError::Contract("joint_loss needs at least one exit".into()));
    }
    let mut acc = konst(tape, 0.0);
    for o in included {
        let locate = locate_loss_var(tape, &o.box_vars, gt, w)?;
        let target = o.bbox.iou(gt);
        let score = score_loss_var(tape, o.score_var, target)?;
        let per_exit = tape.add(locate, tape.scale(score, T::of_f64(w.score)))?;
        acc = tape.add(acc, per_exit)?;
    }
    let mut total = tape.scale(acc, T::of_f64(1.0 / k as f64));
    if !fwd.students.is_empty() {
        let imit = distill::imitation_loss(tape, &fwd.students, fwd.teacher)?;
        total = tape.add(total, tape.scale(imit, T::of_f64(w.imit)))?;
    }
    Ok(total)
}

/// AdamW: Adam with decoupled weight decay.
///
/// Moment buffers are keyed by parameter name so the optimizer survives
/// re-binding parameters to a fresh tape each step.
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip applied in [`Self::step_params`]; zero disables.
    pub grad_clip: f64,
    t: u64,
    m: HashMap<String, Tensor<T>>,
    v: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            grad_clip: 0.0,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update. `updates` pairs each parameter name with its value
    /// tensor, gradient, and learning rate.
    pub fn step(&mut self, updates: &mut [(String, &mut Tensor<T>, Tensor<T>, f64)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let b1 = T::of_f64(self.beta1);
        let b2 = T::of_f64(self.beta2);
        for (name, value, grad, lr) in updates.iter_mut() {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let md = m.data_mut();
            let vd = v.data_mut();
            let gd = grad.data();
            for i in 0..gd.len() {
                md[i] = b1 * md[i] + (T::one() - b1) * gd[i];
                vd[i] = b2 * vd[i] + (T::one() - b2) * gd[i] * gd[i];
            }
            let lr_t = *lr;
            let wd = self.weight_decay;
            let out = value.data_mut();
            for i in 0..out.len() {
                let m_hat = md[i].to_f64() / bc1;
                let v_hat = vd[i].to_f64() / bc2;
                let update = lr_t * (m_hat / (v_hat.sqrt() + self.eps) + wd * out[i].to_f64());
                out[i] = T::of_f64(out[i].to_f64() - update);
            }
        }
    }

    /// Convenience: pull gradients for bound params off the tape after a
    /// backward pass and update every parameter that received one.
    pub fn step_params(
        &mut self,
        params: &mut [(String, &mut crate::nn::Param<T>)],
        tape: &Tape<T>,
        lr_for: &dyn Fn(&str) -> f64,
    ) {
        let mut updates = Vec::new();
        for (name, p) in params.iter_mut() {
            let Some(id) = p.try_id() else { continue };
            let Some(g) = tape.grad(id) else { continue };
            updates.push((name.clone(), &mut p.value, g, lr_for(name)));
        }
        if self.grad_clip > 0.0 {
            let sq: f64 = updates
                .iter()
                .map(|(_, _, g, _)| {
                    g.data()
                        .iter()
                        .map(|x| {
                            let v = Scalar::to_f64(*x);
                            v * v
                        })
                        .sum::<f64>()
                })
                .sum();
            let norm = sq.sqrt();
            if norm > self.grad_clip {
                let s = T::of_f64(self.grad_clip / norm);
                for (_, _, g, _) in updates.iter_mut() {
                    for x in g.data_mut() {
                        *x = *x * s;
                    }
                }
            }
        }
        self.step(&mut updates);
    }
}

/// Which parameters stage 2 re-optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStrategy {
    /// Backbone and all branches together (the default).
    Joint,
    /// Branches only; backbone frozen after stage 1.
    FixedBackbone,
    /// Hidden branches trained sequentially, backbone frozen.
    OneByOne,
}

impl TrainStrategy {
    pub fn parse(s: &str) -> Result<TrainStrategy> {
        match s {
            "joint" => Ok(TrainStrategy::Joint),
            "fixed-backbone" => Ok(TrainStrategy::FixedBackbone),
            "one-by-one" => Ok(TrainStrategy::OneByOne),
            other => Err(DytxError::Config(format!(
                "unknown training strategy '{other}' (expected joint|fixed-backbone|one-by-one)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub pairs_per_epoch: usize,
    pub lr_heads: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    /// Fraction of each stage after which the learning rate drops 10×.
    pub decay_frac: f64,
    pub strategy: TrainStrategy,
    pub distill: DistillMode,
    /// Search-crop jitter during training, fraction of crop side.
    pub jitter: f64,
    /// Validation pairs evaluated at the end of each epoch.
    pub val_pairs: usize,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs_stage1: 40,
            epochs_stage2: 40,
            pairs_per_epoch: 64,
            lr_heads: 1e-3,
            lr_backbone: 1e-4,
            weight_decay: 1e-4,
            decay_frac: 0.8,
            strategy: TrainStrategy::Joint,
            distill: DistillMode::TargetAware,
            jitter: 0.15,
            val_pairs: 16,
            grad_clip: 1.0,
        }
    }
}

/// One training-log row, serialized to CSV by the caller.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub loss_total: f64,
    pub loss_locate: Vec<f64>,
    pub loss_score: Vec<f64>,
    pub loss_imit: f64,
    pub val_iou: Vec<f64>,
}

fn is_backbone(name: &str) -> bool {
    name.starts_with("encoder")
}

fn sample_pair(
    seqs: &[Sequence],
    jitter: f64,
    rng: &mut RandomState,
    template_size: usize,
    search_size: usize,
) -> Result<SamplePair> {
    let s = &seqs[rng.usize_below(seqs.len())];
    let n = s.frames.len();
    let tz = rng.usize_below(n);
    let mut tx = rng.usize_below(n);
    if tx == tz {
        tx = (tx + 1) % n;
    }
    crop_pair(s, tz, tx, template_size, search_size, jitter, rng)
}

struct StagePlan {
    stage: usize,
    epochs: usize,
    distill: DistillMode,
    trainable: Box<dyn Fn(&str) -> bool>,
    /// First branch included in the forward pass.
    first_exit: usize,
    /// Exits whose losses are optimized; `None` means all in the pass.
    loss_exits: Option<Vec<usize>>,
}

fn stage_plans(model: &Model<f32>, sched: &TrainSchedule) -> Vec<StagePlan> {
    let k = model.num_exits();
    let final_branch = format!("exits.{}", k - 1);
    let mut plans = vec![StagePlan {
        stage: 1,
        epochs: sched.epochs_stage1,
        distill: DistillMode::Off,
        trainable: Box::new(move |n: &str| is_backbone(n) || n.starts_with(&final_branch)),
        first_exit: k - 1,
        loss_exits: None,
    }];
    match sched.strategy {
        TrainStrategy::Joint => plans.push(StagePlan {
            stage: 2,
            epochs: sched.epochs_stage2,
            distill: sched.distill,
            trainable: Box::new(|_| true),
            first_exit: 0,
            loss_exits: None,
        }),
        TrainStrategy::FixedBackbone => plans.push(StagePlan {
            stage: 2,
            epochs: sched.epochs_stage2,
            distill: sched.distill,
            trainable: Box::new(|n: &str| !is_backbone(n)),
            first_exit: 0,
            loss_exits: None,
        }),
        TrainStrategy::OneByOne => {
            let hidden = k - 1;
            let per = (sched.epochs_stage2 / hidden.max(1)).max(1);
            for b in 0..hidden {
                let branch = format!("exits.{b}");
                let imit = format!("imitation.{b}");
                plans.push(StagePlan {
                    stage: 2,
                    epochs: per,
                    distill: sched.distill,
                    trainable: Box::new(move |n: &str| {
                        n.starts_with(&branch) || n.starts_with(&imit)
                    }),
                    first_exit: 0,
                    loss_exits: Some(vec![b]),
                });
            }
        }
    }
    plans
}

/// Mean validation IoU per exit over freshly sampled pairs.
pub fn validate_iou(
    model: &Model<f32>,
    seqs: &[Sequence],
    n_pairs: usize,
    rng: &mut RandomState,
) -> Result<Vec<f64>> {
    let cfg = model.cfg().clone();
    let k = model.num_exits();
    let mut acc = vec![0.0f64; k];
    for _ in 0..n_pairs {
        let pair = sample_pair(seqs, 0.0, rng, cfg.template_size, cfg.search_size)?;
        let tape = Tape::new();
        model.bind(&tape, &|_| false);
        let fwd = model.forward_train(&tape, &pair.template, &pair.search, DistillMode::Off)?;
        for (i, o) in fwd.outcomes.iter().enumerate() {
            acc[i] += o.bbox.iou(&pair.target_box);
        }
    }
    for a in acc.iter_mut() {
        *a /= n_pairs.max(1) as f64;
    }
    Ok(acc)
}

/// Two-stage training. Stage 1 fits the backbone plus the final branch;
/// stage 2 follows the selected strategy. Returns per-epoch log rows;
/// the model is updated in place.
pub fn train(
    model: &mut Model<f32>,
    train_seqs: &[Sequence],
    val_seqs: &[Sequence],
    sched: &TrainSchedule,
    weights: &LossWeights,
    rng: &mut RandomState,
) -> Result<Vec<EpochLog>> {
    if train_seqs.is_empty() {
        return Err(DytxError::Contract("training set is empty".into()));
    }
    weights.validate()?;
    let cfg = model.cfg().clone();
    let k = model.num_exits();
    let mut logs = Vec::new();
    let mut epoch_counter = 0usize;

    let plans = stage_plans(model, sched);
    for plan in &plans {
        // fresh optimizer state per stage
        let mut opt: AdamW<f32> = AdamW::new(sched.weight_decay);
        opt.grad_clip = sched.grad_clip;
        let decay_at = ((plan.epochs as f64) * sched.decay_frac).ceil() as usize;
        for epoch in 0..plan.epochs {
            let lr_mul = if epoch >= decay_at { 0.1 } else { 1.0 };
            let mut sum_total = 0.0;
            let mut sum_locate = vec![0.0f64; k];
            let mut sum_score = vec![0.0f64; k];
            let mut sum_imit = 0.0;
            for _ in 0..sched.pairs_per_epoch {
                let pair = sample_pair(train_seqs, sched.jitter, rng, cfg.template_size, cfg.search_size)?;
                let tape = Tape::new();
                model.bind(&tape, &|n| (plan.trainable)(n));
                let fwd = model.forward_train_from(
                    &tape,
                    &pair.template,
                    &pair.search,
                    plan.distill,
                    plan.first_exit,
                )?;
                // per-term bookkeeping for the log
                for o in &fwd.outcomes {
                    let lv = locate_loss_var(&tape, &o.box_vars, &pair.target_box, weights)?;
                    sum_locate[o.exit_index] += tape.value(lv).item().to_f64();
                    let sv = score_loss_var(&tape, o.score_var, o.bbox.iou(&pair.target_box))?;
                    sum_score[o.exit_index] += tape.value(sv).item().to_f64();
                }
                if !fwd.students.is_empty() {
                    let iv = distill::imitation_loss(&tape, &fwd.students, fwd.teacher)?;
                    sum_imit += tape.value(iv).item().to_f64();
                }
                let loss =
                    joint_loss_over(&tape, &fwd, &pair.target_box, weights, plan.loss_exits.as_deref())?;
                let loss_val = tape.value(loss).item().to_f64();
                if !loss_val.is_finite() {
                    return Err(DytxError::Diverged(format!(
                        "non-finite loss at stage {} epoch {epoch}",
                        plan.stage
                    )));
                }
                sum_total += loss_val;
                tape.backward(loss)?;
                let mut params = model.params_mut();
                opt.step_params(&mut params, &tape, &|name| {
                    lr_mul * if is_backbone(name) { sched.lr_backbone } else { sched.lr_heads }
                });
            }
            let n = sched.pairs_per_epoch as f64;
            let mut vrng = rng.fork(9000 + epoch_counter as u64);
            let val_iou = if sched.val_pairs > 0 && !val_seqs.is_empty() {
                validate_iou(model, val_seqs, sched.val_pairs, &mut vrng)?
            } else {
                vec![0.0; k]
            };
            logs.push(EpochLog {
                epoch: epoch_counter,
                stage: plan.stage,
                loss_total: sum_total / n,
                loss_locate: sum_locate.iter().map(|v| v / n).collect(),
                loss_score: sum_score.iter().map(|v| v / n).collect(),
                loss_imit: sum_imit / n,
                val_iou,
            });
            epoch_counter += 1;
        }
    }
    Ok(logs)
}

/// Serialize log rows with one locate/score column per exit.
pub fn write_log_csv<W: std::io::Write>(logs: &[EpochLog], k: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["epoch".to_string(), "stage".to_string(), "loss_total".to_string()];
    for i in 0..k {
        header.push(format!("loss_locate_{i}"));
    }
    for i in 0..k {
        header.push(format!("loss_score_{i}"));
    }
    header.push("loss_imit".to_string());
    for i in 0..k {
        header.push(format!("val_iou_{i}"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for row in logs {
        let mut rec = vec![
            row.epoch.to_string(),
            row.stage.to_string(),
            format!("{:.6}", row.loss_total),
        ];
        rec.extend(row.loss_locate.iter().map(|v| format!("{v:.6}")));
        rec.extend(row.loss_score.iter().map(|v| format!("{v:.6}")));
        rec.push(format!("{:.6}", row.loss_imit));
        rec.extend(row.val_iou.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> DytxError {
    DytxError::Other(format!("csv: {e}"))
}
