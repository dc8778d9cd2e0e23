//! Parameter containers and the small layer zoo shared by the encoder and
//! the exit branches.

use std::cell::Cell;

use crate::error::Result;
use crate::rng::RandomState;
use crate::scalar::Scalar;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// A learnable tensor. `bind` registers it on the current tape; `id` is only
/// valid for the tape it was last bound to.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    var: Cell<Option<VarId>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param {
            value,
            var: Cell::new(None),
        }
    }

    pub fn bind(&self, tape: &Tape<T>, trainable: bool) {
        let id = tape.var(self.value.clone(), trainable);
        self.var.set(Some(id));
    }

    pub fn id(&self) -> VarId {
        self.var.get().expect("parameter not bound to a tape")
    }

    pub fn try_id(&self) -> Option<VarId> {
        self.var.get()
    }
}

/// Flat named view over a module's parameters.
pub trait ParamSet<T: Scalar> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);

    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Init scheme: weights N(0, 0.02), biases zero. Documented for
/// reproducibility; no pretrained weights at desk scale.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Param<T>, // [in, out]
    pub bias: Param<T>,   // [out]
}

impl<T: Scalar> Linear<T> {
    pub fn init(rng: &mut RandomState, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Param::new(rng.normal_tensor(&[d_in, d_out], INIT_STD)),
            bias: Param::new(Tensor::zeros(&[d_out])),
        }
    }

    /// `x[M, in] -> [M, out]`
    pub fn forward(&self, tape: &Tape<T>, x: VarId) -> Result<VarId> {
        let y = tape.matmul(x, self.weight.id())?;
        tape.add_row_broadcast(y, self.bias.id())
    }
}

impl<T: Scalar> ParamSet<T> for Linear<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gain: Param<T>,
    pub bias: Param<T>,
    pub eps: T,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn init(dim: usize) -> Self {
        LayerNorm {
            gain: Param::new(Tensor::ones(&[dim])),
            bias: Param::new(Tensor::zeros(&[dim])),
            eps: T::of_f64(1e-5),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: VarId) -> Result<VarId> {
        tape.layer_norm(x, self.gain.id(), self.bias.id(), self.eps)
    }
}

impl<T: Scalar> ParamSet<T> for LayerNorm<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "gain"), &self.gain));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "gain"), &mut self.gain));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T: Scalar> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn init(rng: &mut RandomState, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "dim must be divisible by heads");
        MultiHeadAttention {
            wq: Linear::init(rng, dim, dim),
            wk: Linear::init(rng, dim, dim),
            wv: Linear::init(rng, dim, dim),
            wo: Linear::init(rng, dim, dim),
            heads,
        }
    }

    /// Full self-attention over all tokens, `x[N, D] -> [N, D]`.
    pub fn forward(&self, tape: &Tape<T>, x: VarId) -> Result<VarId> {
        let dim = tape.shape(x)[1];
        let dh = dim / self.heads;
        let q = self.wq.forward(tape, x)?;
        let k = self.wk.forward(tape, x)?;
        let v = self.wv.forward(tape, x)?;
        let scale = T::of_f64(1.0 / (dh as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, c0, c1)?;
            let kh = tape.slice_cols(k, c0, c1)?;
            let vh = tape.slice_cols(v, c0, c1)?;
            let kt = tape.transpose2d(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_outs)?;
        self.wo.forward(tape, merged)
    }
}

impl<T: Scalar> ParamSet<T> for MultiHeadAttention<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.wq.collect(&join(prefix, "wq"), out);
        self.wk.collect(&join(prefix, "wk"), out);
        self.wv.collect(&join(prefix, "wv"), out);
        self.wo.collect(&join(prefix, "wo"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.wq.collect_mut(&join(prefix, "wq"), out);
        self.wk.collect_mut(&join(prefix, "wk"), out);
        self.wv.collect_mut(&join(prefix, "wv"), out);
        self.wo.collect_mut(&join(prefix, "wo"), out);
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn init(rng: &mut RandomState, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::init(dim),
            attn: MultiHeadAttention::init(rng, dim, heads),
            ln2: LayerNorm::init(dim),
            fc1: Linear::init(rng, dim, dim * mlp_ratio),
            fc2: Linear::init(rng, dim * mlp_ratio, dim),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: VarId) -> Result<VarId> {
        let a = self.ln1.forward(tape, x)?;
        let a = self.attn.forward(tape, a)?;
        let x = tape.add(x, a)?;
        let m = self.ln2.forward(tape, x)?;
        let m = self.fc1.forward(tape, m)?;
        let m = tape.gelu(m);
        let m = self.fc2.forward(tape, m)?;
        tape.add(x, m)
    }
}

impl<T: Scalar> ParamSet<T> for TransformerBlock<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.ln1.collect(&join(prefix, "ln1"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        self.ln2.collect(&join(prefix, "ln2"), out);
        self.fc1.collect(&join(prefix, "fc1"), out);
        self.fc2.collect(&join(prefix, "fc2"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.ln1.collect_mut(&join(prefix, "ln1"), out);
        self.attn.collect_mut(&join(prefix, "attn"), out);
        self.ln2.collect_mut(&join(prefix, "ln2"), out);
        self.fc1.collect_mut(&join(prefix, "fc1"), out);
        self.fc2.collect_mut(&join(prefix, "fc2"), out);
    }
}

/// 3x3 (or 1x1) conv layer with bias.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>, // [out, in, k, k]
    pub bias: Param<T>,   // [out]
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn init(rng: &mut RandomState, c_in: usize, c_out: usize, k: usize, pad: usize) -> Self {
        Conv2d {
            weight: Param::new(rng.normal_tensor(&[c_out, c_in, k, k], INIT_STD)),
            bias: Param::new(Tensor::zeros(&[c_out])),
            pad,
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: VarId) -> Result<VarId> {
        tape.conv2d(x, self.weight.id(), self.bias.id(), self.pad)
    }
}

impl<T: Scalar> ParamSet<T> for Conv2d<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Helper so composite modules can delegate to named children.
pub fn collect_child<'a, T: Scalar, M: ParamSet<T>>(
    child: &'a M,
    prefix: &str,
    name: &str,
    out: &mut Vec<(String, &'a Param<T>)>,
) {
    child.collect(&join(prefix, name), out);
}

pub fn collect_child_mut<'a, T: Scalar, M: ParamSet<T>>(
    child: &'a mut M,
    prefix: &str,
    name: &str,
    out: &mut Vec<(String, &'a mut Param<T>)>,
) {
    child.collect_mut(&join(prefix, name), out);
}

pub fn join_path(prefix: &str, name: &str) -> String {
    join(prefix, name)
}
