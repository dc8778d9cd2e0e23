//! Full tracker model: encoder plus the cascade of exit branches.
//!
//! The cascade always evaluates decisioner branches in order, so exit k can
//! recycle exit k-1's adapter output. Box heads run only at the exit whose
//! prediction is actually taken.

use crate::backbone::{flops, BackboneConfig, Encoder};
use crate::distill::ImitationAttention;
use crate::error::{DytxError, Result};
use crate::exits::{ExitBranch, ExitOutcome, ReuseMode};
use crate::nn::{collect_child, collect_child_mut, Param, ParamSet};
use crate::rng::RandomState;
use crate::scalar::Scalar;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ExitsConfig {
    pub reuse: ReuseMode,
    /// Adapter depth per exit; default mirrors the 2/1/0 pattern.
    pub adapter_depths: Vec<usize>,
}

impl Default for ExitsConfig {
    fn default() -> Self {
        ExitsConfig {
            reuse: ReuseMode::InputSum,
            adapter_depths: vec![2, 1, 0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub encoder: Encoder<T>,
    pub branches: Vec<ExitBranch<T>>,
    /// One imitation-attention module per hidden branch (training only).
    pub imitation: Vec<ImitationAttention<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn init(bb: &BackboneConfig, ex: &ExitsConfig, rng: &mut RandomState) -> Result<Self> {
        bb.validate()?;
        if ex.adapter_depths.len() != bb.num_exits() {
            return Err(DytxError::Config(format!(
                "adapter_depths has {} entries for {} exits",
                ex.adapter_depths.len(),
                bb.num_exits()
            )));
        }
        let mut enc_rng = rng.fork(1);
        let encoder = Encoder::init(bb, &mut enc_rng)?;
        let mut branches = Vec::new();
        for (k, &depth) in ex.adapter_depths.iter().enumerate() {
            let mut brng = rng.fork(100 + k as u64);
            branches.push(ExitBranch::init(&mut brng, k, depth, bb, ex.reuse)?);
        }
        let mut imitation = Vec::new();
        for k in 0..bb.num_exits().saturating_sub(1) {
            let mut irng = rng.fork(200 + k as u64);
            imitation.push(ImitationAttention::init(&mut irng, bb.dim));
        }
        Ok(Model {
            encoder,
            branches,
            imitation,
        })
    }

    pub fn cfg(&self) -> &BackboneConfig {
        &self.encoder.cfg
    }

    pub fn num_exits(&self) -> usize {
        self.branches.len()
    }

    /// Bind every parameter to `tape`. `trainable` decides per path whether
    /// the parameter receives gradients.
    pub fn bind(&self, tape: &Tape<T>, trainable: &dyn Fn(&str) -> bool) {
        for (name, p) in self.params() {
            p.bind(tape, trainable(&name));
        }
    }

    fn run_branch(
        &self,
        tape: &Tape<T>,
        k: usize,
        h_k: VarId,
        prev_adapter: Option<VarId>,
        with_box: bool,
        flops_so_far: u64,
    ) -> Result<(ExitOutcome, u64)> {
        let branch = &self.branches[k];
        let n_tokens = self.cfg().n_tokens();
        let h_prev = if k == 0 { None } else { prev_adapter };
        let composed = branch.comp(tape, h_k, h_prev)?;
        let (adapter_out, score_var) = branch.decisioner_forward(tape, composed, h_prev, n_tokens)?;
        let flops = flops_so_far + branch.branch_flops(self.cfg(), with_box);
        let outcome = if with_box {
            let search = self.encoder.search_slice(tape, adapter_out)?;
            let (box_vars, _, _) = branch.box_head(tape, search)?;
            let bbox = box_vars.values(tape);
            ExitOutcome {
                exit_index: k,
                bbox,
                score: tape.value(score_var).item().to_f64(),
                box_vars,
                score_var,
                adapter_out,
                flops_so_far: flops,
            }
        } else {
            // score-only evaluation of a rejected/intermediate exit
            ExitOutcome {
                exit_index: k,
                bbox: crate::data::types::BoundingBox::new(0.5, 0.5, 1.0, 1.0),
                score: tape.value(score_var).item().to_f64(),
                box_vars: crate::exits::BoxVars {
                    cx: score_var,
                    cy: score_var,
                    w: score_var,
                    h: score_var,
                },
                score_var,
                adapter_out,
                flops_so_far: flops,
            }
        };
        Ok((outcome, flops))
    }

    /// Training forward: every exit evaluated with box heads, plus the
    /// distillation features. Returns per-exit outcomes, re-weighted student
    /// features `f'_k` and the detached teacher `f_K`.
    pub fn forward_train(
        &self,
        tape: &Tape<T>,
        template: &Tensor<T>,
        search: &Tensor<T>,
        distill: DistillMode,
    ) -> Result<TrainForward> {
        self.forward_train_from(tape, template, search, distill, 0)
    }

    /// Training forward that only runs branches `first_exit..`. Stage 1 uses
    /// `first_exit = K-1` so the backbone and final branch train without any
    /// interference from the (still random) hidden branches; the first branch
    /// that runs composes without a recycled predecessor.
    pub fn forward_train_from(
        &self,
        tape: &Tape<T>,
        template: &Tensor<T>,
        search: &Tensor<T>,
        distill: DistillMode,
        first_exit: usize,
    ) -> Result<TrainForward> {
        let cfg = self.cfg().clone();
        if first_exit >= self.num_exits() {
            return Err(DytxError::Contract(format!(
                "first_exit {first_exit} out of range for {} exits",
                self.num_exits()
            )));
        }
        if distill != DistillMode::Off && first_exit != 0 {
            return Err(DytxError::Contract(
                "distillation requires all branches in the forward pass".into(),
            ));
        }
        let mut seq = self.encoder.embed(tape, template, search)?;
        let mut flops = flops::patch_embed(&cfg);
        let mut layer = 0usize;
        let mut prev_adapter = None;
        let mut outcomes: Vec<ExitOutcome> = Vec::new();
        for (k, &exit_layer) in cfg.exit_layers.iter().enumerate() {
            seq = self.encoder.encode_until(tape, seq, layer, exit_layer)?;
            flops += (exit_layer - layer) as u64 * flops::transformer_layer(cfg.n_tokens(), cfg.dim, cfg.mlp_ratio);
            layer = exit_layer;
            if k < first_exit {
                continue;
            }
            let (outcome, f) = self.run_branch(tape, k, seq, prev_adapter, true, flops)?;
            flops = f;
            prev_adapter = Some(outcome.adapter_out);
            outcomes.push(outcome);
        }
        let teacher_search = self
            .encoder
            .search_slice(tape, outcomes.last().unwrap().adapter_out)?;
        let teacher = tape.detach(teacher_search);
        let mut students = Vec::new();
        if distill != DistillMode::Off {
            for k in 0..self.num_exits() - 1 {
                let f_k = self.encoder.search_slice(tape, outcomes[k].adapter_out)?;
                let f = match distill {
                    DistillMode::TargetAware => self.imitation[k].forward(tape, teacher, f_k)?,
                    DistillMode::Plain => f_k,
                    DistillMode::Off => unreachable!(),
                };
                students.push(f);
            }
        }
        Ok(TrainForward {
            outcomes,
            students,
            teacher,
        })
    }

    /// Run the box head for an exit that was advanced score-only and was
    /// then accepted by the policy.
    pub fn attach_box(&self, tape: &Tape<T>, outcome: &mut ExitOutcome) -> Result<()> {
        let cfg = self.cfg();
        let search = self.encoder.search_slice(tape, outcome.adapter_out)?;
        let (box_vars, _, _) = self.branches[outcome.exit_index].box_head(tape, search)?;
        outcome.bbox = box_vars.values(tape);
        outcome.box_vars = box_vars;
        outcome.flops_so_far += flops::box_proj(cfg.n_search_tokens(), cfg.dim)
            + flops::corner_head(cfg.search_grid(), cfg.dim);
        Ok(())
    }

    /// Begin a resumable inference pass; call `advance_to_exit` for each
    /// successive exit until the policy accepts one.
    pub fn begin_inference(
        &self,
        tape: &Tape<T>,
        template: &Tensor<T>,
        search: &Tensor<T>,
    ) -> Result<InferenceState> {
        let seq = self.encoder.embed(tape, template, search)?;
        Ok(InferenceState {
            seq,
            layer: 0,
            next_exit: 0,
            prev_adapter: None,
            flops: flops::patch_embed(self.cfg()),
        })
    }

    /// Evaluate the next exit in the cascade. `with_box` should be true when
    /// this exit's box will actually be used (taken exit or forced final).
    pub fn advance_to_exit(
        &self,
        tape: &Tape<T>,
        state: &mut InferenceState,
        with_box: bool,
    ) -> Result<ExitOutcome> {
        let cfg = self.cfg();
        let k = state.next_exit;
        if k >= self.num_exits() {
            return Err(DytxError::Contract("cascade already exhausted".into()));
        }
        let exit_layer = cfg.exit_layers[k];
        state.seq = self.encoder.encode_until(tape, state.seq, state.layer, exit_layer)?;
        state.flops += (exit_layer - state.layer) as u64
            * flops::transformer_layer(cfg.n_tokens(), cfg.dim, cfg.mlp_ratio);
        state.layer = exit_layer;
        let (outcome, flops) =
            self.run_branch(tape, k, state.seq, state.prev_adapter, with_box, state.flops)?;
        state.flops = flops;
        state.prev_adapter = Some(outcome.adapter_out);
        state.next_exit = k + 1;
        Ok(outcome)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    Off,
    /// Self-distillation without imitation attention.
    Plain,
    /// Imitation attention re-weighting (the default).
    TargetAware,
}

impl DistillMode {
    pub fn parse(s: &str) -> Result<DistillMode> {
        match s {
            "off" => Ok(DistillMode::Off),
            "plain" => Ok(DistillMode::Plain),
            "on" => Ok(DistillMode::TargetAware),
            other => Err(DytxError::Config(format!(
                "unknown distill mode '{other}' (expected on|off|plain)"
            ))),
        }
    }
}

pub struct TrainForward {
    pub outcomes: Vec<ExitOutcome>,
    /// Re-weighted (or plain) student features, one per hidden branch.
    pub students: Vec<VarId>,
    /// Detached teacher search tokens.
    pub teacher: VarId,
}

pub struct InferenceState {
    seq: VarId,
    layer: usize,
    next_exit: usize,
    prev_adapter: Option<VarId>,
    flops: u64,
}

impl<T: Scalar> ParamSet<T> for Model<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        collect_child(&self.encoder, prefix, "encoder", out);
        for (k, b) in self.branches.iter().enumerate() {
            collect_child(b, prefix, &format!("exits.{k}"), out);
        }
        for (k, g) in self.imitation.iter().enumerate() {
            collect_child(g, prefix, &format!("imitation.{k}"), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        collect_child_mut(&mut self.encoder, prefix, "encoder", out);
        for (k, b) in self.branches.iter_mut().enumerate() {
            collect_child_mut(b, prefix, &format!("exits.{k}"), out);
        }
        for (k, g) in self.imitation.iter_mut().enumerate() {
            collect_child_mut(g, prefix, &format!("imitation.{k}"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(seed: u64, reuse: ReuseMode) -> Model<f32> {
        let bb = BackboneConfig::default();
        let ex = ExitsConfig {
            reuse,
            ..Default::default()
        };
        let mut rng = RandomState::new(seed);
        Model::init(&bb, &ex, &mut rng).unwrap()
    }

    fn toy_inputs(seed: u64) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = RandomState::new(seed);
        (
            rng.uniform_tensor(&[3, 32, 32], 0.0, 1.0),
            rng.uniform_tensor(&[3, 64, 64], 0.0, 1.0),
        )
    }

    #[test]
    fn flops_strictly_increasing_across_exits() {
        let model = toy_model(1, ReuseMode::InputSum);
        let (z, x) = toy_inputs(2);
        let tape = Tape::new();
        model.bind(&tape, &|_| false);
        let fwd = model.forward_train(&tape, &z, &x, DistillMode::Off).unwrap();
        let f: Vec<u64> = fwd.outcomes.iter().map(|o| o.flops_so_far).collect();
        assert!(f[0] < f[1] && f[1] < f[2], "{f:?}");
    }

    #[test]
    fn deterministic_outcomes_for_same_seed() {
        let run = || {
            let model = toy_model(5, ReuseMode::InputSum);
            let (z, x) = toy_inputs(6);
            let tape = Tape::new();
            model.bind(&tape, &|_| false);
            let fwd = model.forward_train(&tape, &z, &x, DistillMode::Off).unwrap();
            fwd.outcomes
                .iter()
                .map(|o| (o.bbox, o.score))
                .collect::<Vec<_>>()
        };
        assert_eq!(format!("{:?}", run()), format!("{:?}", run()));
    }

    #[test]
    fn reuse_none_vs_input_sum_differ_only_with_prev() {
        // exit 0 has no predecessor: identical. Later exits differ.
        let m_none = toy_model(9, ReuseMode::None);
        let mut m_sum = toy_model(9, ReuseMode::InputSum);
        // same weights for both
        let src = m_none.params();
        for ((_, dst), (_, s)) in m_sum.params_mut().into_iter().zip(src) {
            dst.value = s.value.clone();
        }
        let (z, x) = toy_inputs(10);
        let run = |m: &Model<f32>| {
            let tape = Tape::new();
            m.bind(&tape, &|_| false);
            let fwd = m.forward_train(&tape, &z, &x, DistillMode::Off).unwrap();
            fwd.outcomes.iter().map(|o| o.bbox).collect::<Vec<_>>()
        };
        let a = run(&m_none);
        let b = run(&m_sum);
        assert_eq!(format!("{:?}", a[0]), format!("{:?}", b[0]));
        assert_ne!(format!("{:?}", a[1]), format!("{:?}", b[1]));
    }

    #[test]
    fn all_boxes_satisfy_invariants() {
        let model = toy_model(3, ReuseMode::InputSum);
        for seed in 0..5 {
            let (z, x) = toy_inputs(seed);
            let tape = Tape::new();
            model.bind(&tape, &|_| false);
            let fwd = model.forward_train(&tape, &z, &x, DistillMode::Off).unwrap();
            for o in &fwd.outcomes {
                o.bbox.validate_normalized().unwrap();
                assert!((0.0..=1.0).contains(&o.score));
            }
        }
    }

    #[test]
    fn inference_final_exit_matches_training_forward() {
        let model = toy_model(21, ReuseMode::InputSum);
        let (z, x) = toy_inputs(22);
        let tape = Tape::new();
        model.bind(&tape, &|_| false);
        let fwd = model.forward_train(&tape, &z, &x, DistillMode::Off).unwrap();

        let tape2 = Tape::new();
        model.bind(&tape2, &|_| false);
        let mut st = model.begin_inference(&tape2, &z, &x).unwrap();
        let mut last = None;
        for k in 0..3 {
            last = Some(model.advance_to_exit(&tape2, &mut st, k == 2).unwrap());
        }
        let inf = last.unwrap();
        let tr = &fwd.outcomes[2];
        assert_eq!(format!("{:?}", inf.bbox), format!("{:?}", tr.bbox));
        assert_eq!(inf.score, tr.score);
    }
}
