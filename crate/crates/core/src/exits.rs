//! Decisioner networks and box heads: feature recycling, adapter, IoU score
//! head, and the corner-style box predictor attached to each exit.

use crate::backbone::{flops, BackboneConfig};
use crate::data::types::BoundingBox;
use crate::error::{DytxError, Result};
use crate::nn::{collect_child, collect_child_mut, Conv2d, Linear, Param, ParamSet, TransformerBlock};
use crate::rng::RandomState;
use crate::scalar::Scalar;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReuseMode {
    None,
    Residual,
    InputSum,
    Concat,
    GatedSum,
}

impl ReuseMode {
    pub fn parse(s: &str) -> Result<ReuseMode> {
        match s {
            "none" => Ok(ReuseMode::None),
            "residual" => Ok(ReuseMode::Residual),
            "input_sum" => Ok(ReuseMode::InputSum),
            "concat" => Ok(ReuseMode::Concat),
            "gated_sum" => Ok(ReuseMode::GatedSum),
            other => Err(DytxError::Config(format!(
                "unknown reuse mode '{other}' (expected none|residual|input_sum|concat|gated_sum)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ReuseMode::None => "none",
            ReuseMode::Residual => "residual",
            ReuseMode::InputSum => "input_sum",
            ReuseMode::Concat => "concat",
            ReuseMode::GatedSum => "gated_sum",
        }
    }
}

/// Box coordinates still on the tape (differentiable).
#[derive(Debug, Clone, Copy)]
pub struct BoxVars {
    pub cx: VarId,
    pub cy: VarId,
    pub w: VarId,
    pub h: VarId,
}

impl BoxVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> BoundingBox {
        BoundingBox::new(
            tape.value(self.cx).item().to_f64(),
            tape.value(self.cy).item().to_f64(),
            tape.value(self.w).item().to_f64(),
            tape.value(self.h).item().to_f64(),
        )
    }
}

/// Per-exit prediction bundle.
#[derive(Debug, Clone)]
pub struct ExitOutcome {
    pub exit_index: usize,
    pub bbox: BoundingBox,
    pub score: f64,
    pub box_vars: BoxVars,
    pub score_var: VarId,
    /// Adapter output (full token sequence), recycled by the next exit.
    pub adapter_out: VarId,
    pub flops_so_far: u64,
}

/// Corner predictor branch: two 3x3 convs + 1x1 to a single-channel map.
#[derive(Debug, Clone)]
pub struct CornerStack<T: Scalar> {
    pub c1: Conv2d<T>,
    pub c2: Conv2d<T>,
    pub c3: Conv2d<T>,
}

impl<T: Scalar> CornerStack<T> {
    pub fn init(rng: &mut RandomState, d: usize) -> Self {
        CornerStack {
            c1: Conv2d::init(rng, d, d / 2, 3, 1),
            c2: Conv2d::init(rng, d / 2, d / 4, 3, 1),
            c3: Conv2d::init(rng, d / 4, 1, 1, 0),
        }
    }

    /// `x[D,G,G] -> [G*G]` raw corner logits.
    pub fn forward(&self, tape: &Tape<T>, x: VarId) -> Result<VarId> {
        let g = tape.shape(x)[1];
        let y = self.c1.forward(tape, x)?;
        let y = tape.relu(y);
        let y = self.c2.forward(tape, y)?;
        let y = tape.relu(y);
        let y = self.c3.forward(tape, y)?;
        tape.reshape(y, vec![g * g])
    }
}

impl<T: Scalar> ParamSet<T> for CornerStack<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        collect_child(&self.c1, prefix, "c1", out);
        collect_child(&self.c2, prefix, "c2", out);
        collect_child(&self.c3, prefix, "c3", out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        collect_child_mut(&mut self.c1, prefix, "c1", out);
        collect_child_mut(&mut self.c2, prefix, "c2", out);
        collect_child_mut(&mut self.c3, prefix, "c3", out);
    }
}

/// One exit: reuse composition + adapter + score head + box head.
#[derive(Debug, Clone)]
pub struct ExitBranch<T: Scalar> {
    pub index: usize,
    pub adapter: Vec<TransformerBlock<T>>,
    pub score_fc1: Linear<T>,
    pub score_fc2: Linear<T>,
    pub score_fc3: Linear<T>,
    pub box_proj: Linear<T>,
    pub corner_tl: CornerStack<T>,
    pub corner_br: CornerStack<T>,
    /// Residual gate, only instantiated for `gated_sum`.
    pub gate_fc1: Option<Linear<T>>,
    pub gate_fc2: Option<Linear<T>>,
    pub reuse_mode: ReuseMode,
}

impl<T: Scalar> ExitBranch<T> {
    pub fn init(
        rng: &mut RandomState,
        index: usize,
        adapter_depth: usize,
        cfg: &BackboneConfig,
        reuse_mode: ReuseMode,
    ) -> Result<Self> {
        let d = cfg.dim;
        if reuse_mode == ReuseMode::Concat && adapter_depth == 0 && index > 0 {
            return Err(DytxError::Config(format!(
                "exit {index}: concat reuse needs an adapter (depth 0) to absorb extra tokens"
            )));
        }
        let adapter = (0..adapter_depth)
            .map(|_| TransformerBlock::init(rng, d, cfg.heads, cfg.mlp_ratio))
            .collect();
        let (gate_fc1, gate_fc2) = if reuse_mode == ReuseMode::GatedSum && index > 0 {
            (
                Some(Linear::init(rng, d, d)),
                Some(Linear::init(rng, d, d)),
            )
        } else {
            (None, None)
        };
        Ok(ExitBranch {
            index,
            adapter,
            score_fc1: Linear::init(rng, d, d),
            score_fc2: Linear::init(rng, d, d),
            score_fc3: Linear::init(rng, d, 1),
            box_proj: Linear::init(rng, d, d),
            corner_tl: CornerStack::init(rng, d),
            corner_br: CornerStack::init(rng, d),
            gate_fc1,
            gate_fc2,
            reuse_mode,
        })
    }

    /// Feature composition (Comp): merge the tapped hidden state with the
    /// previous exit's recycled features according to the reuse schema.
    /// `residual` is handled after the adapter; here it passes through.
    pub fn comp(&self, tape: &Tape<T>, h_k: VarId, h_prev: Option<VarId>) -> Result<VarId> {
        let h_prev = match h_prev {
            // first exit: identity on h_1
            None => return Ok(h_k),
            Some(p) => p,
        };
        match self.reuse_mode {
            ReuseMode::None | ReuseMode::Residual => Ok(h_k),
            ReuseMode::InputSum => tape.add(h_k, h_prev),
            ReuseMode::Concat => tape.concat_rows(&[h_k, h_prev]),
            ReuseMode::GatedSum => {
                let g = self
                    .gate_fc1
                    .as_ref()
                    .expect("gated_sum branch missing gate")
                    .forward(tape, h_prev)?;
                let g = tape.relu(g);
                let g = self.gate_fc2.as_ref().unwrap().forward(tape, g)?;
                let g = tape.tanh(g);
                let gated = tape.mul(g, h_prev)?;
                tape.add(h_k, gated)
            }
        }
    }

    /// Adapter + score head. Returns `(adapter_out, score_var)` where
    /// `adapter_out` has the same token count as the tapped state.
    pub fn decisioner_forward(
        &self,
        tape: &Tape<T>,
        h_comp: VarId,
        h_prev: Option<VarId>,
        n_tokens: usize,
    ) -> Result<(VarId, VarId)> {
        let mut x = h_comp;
        for block in &self.adapter {
            x = block.forward(tape, x)?;
        }
        if self.reuse_mode == ReuseMode::Concat && tape.shape(x)[0] > n_tokens {
            x = tape.slice_rows(x, 0, n_tokens)?;
        }
        if self.reuse_mode == ReuseMode::Residual {
            if let Some(p) = h_prev {
                x = tape.add(x, p)?;
            }
        }
        let iou_tok = tape.slice_rows(x, 0, 1)?;
        let s = self.score_fc1.forward(tape, iou_tok)?;
        let s = tape.relu(s);
        let s = self.score_fc2.forward(tape, s)?;
        let s = tape.relu(s);
        let s = self.score_fc3.forward(tape, s)?;
        let s = tape.reshape(s, vec![1])?;
        let s = tape.sigmoid(s);
        Ok((x, s))
    }

    /// Corner-style box head over the search-token slice.
    pub fn box_head(&self, tape: &Tape<T>, search_tokens: VarId) -> Result<(BoxVars, VarId, VarId)> {
        let shape = tape.shape(search_tokens);
        let n = shape[0];
        let d = shape[1];
        let g = (n as f64).sqrt() as usize;
        if g * g != n {
            return Err(DytxError::Dimension(format!(
                "box head needs a square search grid, got {n} tokens"
            )));
        }
        let proj = self.box_proj.forward(tape, search_tokens)?;
        // [N,D] -> [D,N] -> [D,G,G]; token order is row-major over the grid
        let grid = tape.transpose2d(proj);
        let grid = tape.reshape(grid, vec![d, g, g])?;
        let tl_logits = self.corner_tl.forward(tape, grid)?;
        let br_logits = self.corner_br.forward(tape, grid)?;
        let tl = tape.softmax(tl_logits, 0)?;
        let br = tape.softmax(br_logits, 0)?;

        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for i in 0..g {
            for j in 0..g {
                xs.push(T::of_f64((j as f64 + 0.5) / g as f64));
                ys.push(T::of_f64((i as f64 + 0.5) / g as f64));
            }
        }
        let xs = tape.constant(Tensor::new(vec![n], xs));
        let ys = tape.constant(Tensor::new(vec![n], ys));

        let expect = |p: VarId, coords: VarId| -> Result<VarId> {
            let w = tape.mul(p, coords)?;
            Ok(tape.sum(w))
        };
        let x1 = expect(tl, xs)?;
        let y1 = expect(tl, ys)?;
        let x2 = expect(br, xs)?;
        let y2 = expect(br, ys)?;

        // Order the corners with min/max rather than clamping the width: a
        // hard floor on w has zero gradient whenever both softmaxes collapse
        // to the same cell, which freezes size learning at initialization.
        let x_lo = tape.min_elem(x1, x2)?;
        let x_hi = tape.max_elem(x1, x2)?;
        let y_lo = tape.min_elem(y1, y2)?;
        let y_hi = tape.max_elem(y1, y2)?;

        let half = T::of_f64(0.5);
        let eps = tape.constant(Tensor::new(vec![1], vec![T::of_f64(1e-4)]));
        let cx = tape.scale(tape.add(x_lo, x_hi)?, half);
        let cy = tape.scale(tape.add(y_lo, y_hi)?, half);
        let w = tape.add(tape.sub(x_hi, x_lo)?, eps)?;
        let h = tape.add(tape.sub(y_hi, y_lo)?, eps)?;
        Ok((BoxVars { cx, cy, w, h }, tl, br))
    }

    /// Branch cost in multiply-adds, given the backbone config.
    /// Multiply-add count for this branch. `with_box` includes the corner
    /// head, which only runs at the exit whose box is actually taken.
    pub fn branch_flops(&self, cfg: &BackboneConfig, with_box: bool) -> u64 {
        let n = cfg.n_tokens();
        let d = cfg.dim;
        let adapter_tokens = if self.reuse_mode == ReuseMode::Concat && self.index > 0 {
            2 * n
        } else {
            n
        };
        let mut total = 0u64;
        for _ in &self.adapter {
            total += flops::transformer_layer(adapter_tokens, d, cfg.mlp_ratio);
        }
        if self.gate_fc1.is_some() {
            total += flops::gate(n, d);
        }
        total += flops::score_head(d);
        if with_box {
            total += flops::box_proj(cfg.n_search_tokens(), d);
            total += flops::corner_head(cfg.search_grid(), d);
        }
        total
    }
}

impl<T: Scalar> ParamSet<T> for ExitBranch<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, b) in self.adapter.iter().enumerate() {
            collect_child(b, prefix, &format!("adapter.{i}"), out);
        }
        collect_child(&self.score_fc1, prefix, "score_fc1", out);
        collect_child(&self.score_fc2, prefix, "score_fc2", out);
        collect_child(&self.score_fc3, prefix, "score_fc3", out);
        collect_child(&self.box_proj, prefix, "box_proj", out);
        collect_child(&self.corner_tl, prefix, "corner_tl", out);
        collect_child(&self.corner_br, prefix, "corner_br", out);
        if let Some(g) = &self.gate_fc1 {
            collect_child(g, prefix, "gate_fc1", out);
        }
        if let Some(g) = &self.gate_fc2 {
            collect_child(g, prefix, "gate_fc2", out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, b) in self.adapter.iter_mut().enumerate() {
            collect_child_mut(b, prefix, &format!("adapter.{i}"), out);
        }
        collect_child_mut(&mut self.score_fc1, prefix, "score_fc1", out);
        collect_child_mut(&mut self.score_fc2, prefix, "score_fc2", out);
        collect_child_mut(&mut self.score_fc3, prefix, "score_fc3", out);
        collect_child_mut(&mut self.box_proj, prefix, "box_proj", out);
        collect_child_mut(&mut self.corner_tl, prefix, "corner_tl", out);
        collect_child_mut(&mut self.corner_br, prefix, "corner_br", out);
        if let Some(g) = &mut self.gate_fc1 {
            collect_child_mut(g, prefix, "gate_fc1", out);
        }
        if let Some(g) = &mut self.gate_fc2 {
            collect_child_mut(g, prefix, "gate_fc2", out);
        }
    }
}
