//! Joint template-search transformer encoder with an IoU token and tap
//! points at the configured exit layers.
//!
//! Token layout is fixed as `[IoU | template | search]` and never permuted.

use crate::error::{DytxError, Result};
use crate::nn::{collect_child, collect_child_mut, Linear, Param, ParamSet, TransformerBlock, INIT_STD};
use crate::rng::RandomState;
use crate::scalar::Scalar;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    /// Strictly increasing 1-based layer indices; last must equal `depth`.
    pub exit_layers: Vec<usize>,
    pub template_size: usize,
    pub search_size: usize,
}

impl Default for BackboneConfig {
    /// Toy config: half-depth analog of a 12-layer encoder with exits at
    /// 2/6/12, keeping the early/middle/final geometry.
    fn default() -> Self {
        BackboneConfig {
            depth: 6,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            patch: 8,
            exit_layers: vec![2, 4, 6],
            template_size: 32,
            search_size: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exit_layers.is_empty() {
            return Err(DytxError::Config("exit_layers must be non-empty".into()));
        }
        if !self.exit_layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(DytxError::Config(format!(
                "exit_layers must be strictly increasing, got {:?}",
                self.exit_layers
            )));
        }
        if *self.exit_layers.last().unwrap() != self.depth {
            return Err(DytxError::Config(format!(
                "last exit layer {} must equal depth {}",
                self.exit_layers.last().unwrap(),
                self.depth
            )));
        }
        if self.exit_layers[0] < 1 {
            return Err(DytxError::Config("exit layers are 1-based".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(DytxError::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.template_size % self.patch != 0 || self.search_size % self.patch != 0 {
            return Err(DytxError::Config(format!(
                "template/search sizes {}/{} not divisible by patch {}",
                self.template_size, self.search_size, self.patch
            )));
        }
        Ok(())
    }

    pub fn num_exits(&self) -> usize {
        self.exit_layers.len()
    }

    pub fn n_template_tokens(&self) -> usize {
        let g = self.template_size / self.patch;
        g * g
    }

    pub fn n_search_tokens(&self) -> usize {
        let g = self.search_size / self.patch;
        g * g
    }

    /// Total token count: IoU + template + search.
    pub fn n_tokens(&self) -> usize {
        1 + self.n_template_tokens() + self.n_search_tokens()
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch
    }
}

/// Cut a `[C,H,W]` image into non-overlapping `P x P` patches, flattened
/// row-major to `[(H/P)(W/P), C*P*P]`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(DytxError::Dimension(format!(
            "patchify expects [C,H,W], got {:?}",
            shape
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % patch != 0 || w % patch != 0 {
        return Err(DytxError::Config(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(gh * gw * c * patch * patch);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for iy in 0..patch {
                    for ix in 0..patch {
                        let y = py * patch + iy;
                        let x = px * patch + ix;
                        out.push(image.data()[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, c * patch * patch], out))
}

/// The encoder Φ plus its learned positional embeddings and IoU token.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    pub cfg: BackboneConfig,
    pub patch_proj: Linear<T>,
    pub iou_token: Param<T>,
    pub pos_iou: Param<T>,
    pub pos_template: Param<T>,
    pub pos_search: Param<T>,
    pub blocks: Vec<TransformerBlock<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn init(cfg: &BackboneConfig, rng: &mut RandomState) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let patch_dim = 3 * cfg.patch * cfg.patch;
        let blocks = (0..cfg.depth)
            .map(|_| TransformerBlock::init(rng, d, cfg.heads, cfg.mlp_ratio))
            .collect();
        Ok(Encoder {
            cfg: cfg.clone(),
            patch_proj: Linear::init(rng, patch_dim, d),
            iou_token: Param::new(rng.normal_tensor(&[1, d], INIT_STD)),
            pos_iou: Param::new(rng.normal_tensor(&[1, d], INIT_STD)),
            pos_template: Param::new(rng.normal_tensor(&[cfg.n_template_tokens(), d], INIT_STD)),
            pos_search: Param::new(rng.normal_tensor(&[cfg.n_search_tokens(), d], INIT_STD)),
            blocks,
        })
    }

    /// Tokenize template + search crops and assemble the
    /// `[IoU | template | search]` sequence with positional embeddings.
    pub fn embed(&self, tape: &Tape<T>, template: &Tensor<T>, search: &Tensor<T>) -> Result<VarId> {
        let pz = patchify(template, self.cfg.patch)?;
        let px = patchify(search, self.cfg.patch)?;
        if pz.shape()[0] != self.cfg.n_template_tokens() || px.shape()[0] != self.cfg.n_search_tokens()
        {
            return Err(DytxError::Dimension(format!(
                "crop sizes {:?}/{:?} do not match configured token counts",
                template.shape(),
                search.shape()
            )));
        }
        let z_tokens = self.patch_proj.forward(tape, tape.constant(pz))?;
        let x_tokens = self.patch_proj.forward(tape, tape.constant(px))?;
        let z_tokens = tape.add(z_tokens, self.pos_template.id())?;
        let x_tokens = tape.add(x_tokens, self.pos_search.id())?;
        let iou = tape.add(self.iou_token.id(), self.pos_iou.id())?;
        tape.concat_rows(&[iou, z_tokens, x_tokens])
    }

    /// Apply encoder blocks for layers `(from, to]` (1-based layer count).
    /// Splitting a pass at any point composes to the unsplit pass.
    pub fn encode_until(&self, tape: &Tape<T>, seq: VarId, from: usize, to: usize) -> Result<VarId> {
        if from >= to || to > self.cfg.depth {
            return Err(DytxError::Contract(format!(
                "encode_until range ({from}, {to}] invalid for depth {}",
                self.cfg.depth
            )));
        }
        let mut x = seq;
        for block in &self.blocks[from..to] {
            x = block.forward(tape, x)?;
        }
        Ok(x)
    }

    /// Slice helpers for the fixed token layout.
    pub fn iou_slice(&self, tape: &Tape<T>, seq: VarId) -> Result<VarId> {
        tape.slice_rows(seq, 0, 1)
    }

    pub fn search_slice(&self, tape: &Tape<T>, seq: VarId) -> Result<VarId> {
        let start = 1 + self.cfg.n_template_tokens();
        tape.slice_rows(seq, start, start + self.cfg.n_search_tokens())
    }
}

impl<T: Scalar> ParamSet<T> for Encoder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        collect_child(&self.patch_proj, prefix, "patch_proj", out);
        out.push((crate::nn::join_path(prefix, "iou_token"), &self.iou_token));
        out.push((crate::nn::join_path(prefix, "pos_iou"), &self.pos_iou));
        out.push((crate::nn::join_path(prefix, "pos_template"), &self.pos_template));
        out.push((crate::nn::join_path(prefix, "pos_search"), &self.pos_search));
        for (i, b) in self.blocks.iter().enumerate() {
            collect_child(b, prefix, &format!("blocks.{i}"), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        collect_child_mut(&mut self.patch_proj, prefix, "patch_proj", out);
        out.push((crate::nn::join_path(prefix, "iou_token"), &mut self.iou_token));
        out.push((crate::nn::join_path(prefix, "pos_iou"), &mut self.pos_iou));
        out.push((
            crate::nn::join_path(prefix, "pos_template"),
            &mut self.pos_template,
        ));
        out.push((crate::nn::join_path(prefix, "pos_search"), &mut self.pos_search));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            collect_child_mut(b, prefix, &format!("blocks.{i}"), out);
        }
    }
}

/// Multiply-add counts. Only matrix-multiply and convolution MACs are
/// counted; normalization and softmax are negligible at these sizes.
pub mod flops {
    use super::BackboneConfig;

    /// One encoder (or adapter) layer over `n` tokens of width `d`.
    /// qkv + output projections: 4·n·d²; attention scores and weighted sum:
    /// 2·n²·d; MLP: 2·r·n·d².
    pub fn transformer_layer(n: usize, d: usize, mlp_ratio: usize) -> u64 {
        let (n, d, r) = (n as u64, d as u64, mlp_ratio as u64);
        4 * n * d * d + 2 * n * n * d + 2 * r * n * d * d
    }

    pub fn patch_embed(cfg: &BackboneConfig) -> u64 {
        let patch_dim = (3 * cfg.patch * cfg.patch) as u64;
        ((cfg.n_template_tokens() + cfg.n_search_tokens()) as u64) * patch_dim * (cfg.dim as u64)
    }

    /// 3-layer score MLP on the single IoU token.
    pub fn score_head(d: usize) -> u64 {
        let d = d as u64;
        d * d + d * d + d
    }

    /// Linear projection feeding the box head.
    pub fn box_proj(n_search: usize, d: usize) -> u64 {
        (n_search as u64) * (d as u64) * (d as u64)
    }

    /// Two corner branches of 3x3,3x3,1x1 convs on a `g x g` grid.
    pub fn corner_head(g: usize, d: usize) -> u64 {
        let (g2, d) = ((g * g) as u64, d as u64);
        let c1 = d / 2;
        let c2 = d / 4;
        let one_branch = g2 * d * c1 * 9 + g2 * c1 * c2 * 9 + g2 * c2;
        2 * one_branch
    }

    /// Residual-gate MLP of the gated_sum reuse schema.
    pub fn gate(n: usize, d: usize) -> u64 {
        2 * (n as u64) * (d as u64) * (d as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn toy() -> BackboneConfig {
        BackboneConfig::default()
    }

    #[test]
    fn token_counts() {
        let cfg = toy();
        assert_eq!(cfg.n_search_tokens(), 64); // (64/8)^2
        assert_eq!(cfg.n_template_tokens(), 16); // (32/8)^2
        assert_eq!(cfg.n_tokens(), 81); // 1 + 16 + 64
    }

    #[test]
    fn patchify_degenerate_single_token() {
        // P = H → one token equal to the flattened image
        let img: Tensor<f64> = Tensor::new(vec![3, 4, 4], (0..48).map(|i| i as f64).collect());
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 48]);
        assert_eq!(p.data(), img.data());
    }

    #[test]
    fn bad_exit_layers_rejected() {
        let mut cfg = toy();
        cfg.exit_layers = vec![2, 2, 6];
        assert!(cfg.validate().is_err());
        cfg.exit_layers = vec![2, 4];
        assert!(cfg.validate().is_err()); // last != depth
        cfg.exit_layers = vec![2, 4, 6];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn resumable_forward_matches_unsplit() {
        let cfg = toy();
        let mut rng = RandomState::new(11);
        let enc: Encoder<f64> = Encoder::init(&cfg, &mut rng).unwrap();
        let template: Tensor<f64> = rng.uniform_tensor(&[3, 32, 32], 0.0, 1.0);
        let search: Tensor<f64> = rng.uniform_tensor(&[3, 64, 64], 0.0, 1.0);

        let tape = Tape::new();
        for (_, p) in enc.params() {
            p.bind(&tape, false);
        }
        let seq = enc.embed(&tape, &template, &search).unwrap();
        let full = enc.encode_until(&tape, seq, 0, 6).unwrap();
        let part = enc.encode_until(&tape, seq, 0, 2).unwrap();
        let part = enc.encode_until(&tape, part, 2, 4).unwrap();
        let part = enc.encode_until(&tape, part, 4, 6).unwrap();
        let a = tape.value(full);
        let b = tape.value(part);
        // identical op order → bit-identical
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn flops_hand_count_one_layer() {
        // N=81, D=64, r=4: qkv+proj 4*81*64^2 = 1_327_104;
        // scores+apply 2*81^2*64 = 839_808; mlp 2*4*81*64^2 = 2_654_208.
        let expect = 1_327_104 + 839_808 + 2_654_208;
        assert_eq!(flops::transformer_layer(81, 64, 4), expect);
    }

    #[test]
    fn positional_equivariance_of_attention() {
        // Shuffling search tokens together with their positional embeddings
        // permutes the output search tokens correspondingly.
        let cfg = toy();
        let mut rng = RandomState::new(5);
        let mut enc: Encoder<f64> = Encoder::init(&cfg, &mut rng).unwrap();
        let template: Tensor<f64> = rng.uniform_tensor(&[3, 32, 32], 0.0, 1.0);
        let search: Tensor<f64> = rng.uniform_tensor(&[3, 64, 64], 0.0, 1.0);

        let run = |enc: &Encoder<f64>, search: &Tensor<f64>| -> Tensor<f64> {
            let tape = Tape::new();
            for (_, p) in enc.params() {
                p.bind(&tape, false);
            }
            let seq = enc.embed(&tape, &template, search).unwrap();
            let out = enc.encode_until(&tape, seq, 0, cfg.depth).unwrap();
            let s = enc.search_slice(&tape, out).unwrap();
            tape.value(s)
        };

        let base = run(&enc, &search);

        // Swap search patches 0 and 5 (patch grid 8x8, patches in row 0).
        let perm_search = {
            let mut img = search.clone();
            let d = img.data_mut();
            // swap 8x8 pixel blocks (0,0) and (0,5) in all channels
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        let i = (c * 64 + y) * 64 + x;
                        let j = (c * 64 + y) * 64 + (5 * 8 + x);
                        d.swap(i, j);
                    }
                }
            }
            img
        };
        // Swap the matching positional embedding rows.
        {
            let pos = &mut enc.pos_search.value;
            let d = pos.data_mut();
            for k in 0..cfg.dim {
                d.swap(k, 5 * cfg.dim + k);
            }
        }
        let permuted = run(&enc, &perm_search);

        // Output rows 0 and 5 swap; all others match.
        let n = cfg.n_search_tokens();
        let d = cfg.dim;
        for row in 0..n {
            let src = match row {
                0 => 5,
                5 => 0,
                r => r,
            };
            for k in 0..d {
                let a = base.data()[src * d + k];
                let b = permuted.data()[row * d + k];
                assert!((a - b).abs() < 1e-9, "row {row} ch {k}: {a} vs {b}");
            }
        }
    }
}
