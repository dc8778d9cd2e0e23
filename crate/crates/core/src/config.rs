//! TOML run configuration. Unknown keys are rejected so typos fail loudly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{DytxError, Result};
use crate::exits::ReuseMode;
use crate::inference::ExitPolicy;
use crate::model::{DistillMode, ExitsConfig};
use crate::objectives::{LossWeights, TrainSchedule, TrainStrategy};

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub backbone: BackboneSection,
    pub exits: ExitsSection,
    pub train: TrainSection,
    pub infer: InferSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub exit_layers: Vec<usize>,
    pub template_size: usize,
    pub search_size: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let c = BackboneConfig::default();
        BackboneSection {
            depth: c.depth,
            dim: c.dim,
            heads: c.heads,
            mlp_ratio: c.mlp_ratio,
            patch: c.patch,
            exit_layers: c.exit_layers,
            template_size: c.template_size,
            search_size: c.search_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExitsSection {
    /// none | residual | input_sum | concat | gated_sum
    pub reuse: String,
    pub adapter_depths: Vec<usize>,
}

impl Default for ExitsSection {
    fn default() -> Self {
        ExitsSection {
            reuse: "input_sum".to_string(),
            adapter_depths: vec![2, 1, 0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub pairs_per_epoch: usize,
    pub lr_heads: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub decay_frac: f64,
    /// joint | fixed-backbone | one-by-one
    pub strategy: String,
    /// on | off | plain
    pub distill: String,
    pub jitter: f64,
    pub val_pairs: usize,
    pub grad_clip: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_score: f64,
    pub lambda_imit: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = TrainSchedule::default();
        let w = LossWeights::default();
        TrainSection {
            epochs_stage1: s.epochs_stage1,
            epochs_stage2: s.epochs_stage2,
            pairs_per_epoch: s.pairs_per_epoch,
            lr_heads: s.lr_heads,
            lr_backbone: s.lr_backbone,
            weight_decay: s.weight_decay,
            decay_frac: s.decay_frac,
            strategy: "joint".to_string(),
            distill: "on".to_string(),
            jitter: s.jitter,
            val_pairs: s.val_pairs,
            grad_clip: s.grad_clip,
            lambda_l1: w.l1,
            lambda_giou: w.giou,
            lambda_score: w.score,
            lambda_imit: w.imit,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    /// adaptive | fixed:<k> | random:<p0,p1,...>
    pub policy: String,
    pub tau: Vec<f64>,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection {
            policy: "adaptive".to_string(),
            tau: vec![0.5, 0.5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub levels: usize,
    pub sequences_per_level: usize,
    pub length: usize,
    pub frame_size: usize,
    /// Fractions of sequences per level assigned to train/val; the rest is test.
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            levels: 5,
            sequences_per_level: 8,
            length: 24,
            frame_size: 128,
            train_frac: 0.5,
            val_frac: 0.25,
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            DytxError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text).map_err(|e| DytxError::Config(format!("{e}")))
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let c = BackboneConfig {
            depth: self.backbone.depth,
            dim: self.backbone.dim,
            heads: self.backbone.heads,
            mlp_ratio: self.backbone.mlp_ratio,
            patch: self.backbone.patch,
            exit_layers: self.backbone.exit_layers.clone(),
            template_size: self.backbone.template_size,
            search_size: self.backbone.search_size,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn exits_config(&self) -> Result<ExitsConfig> {
        Ok(ExitsConfig {
            reuse: ReuseMode::parse(&self.exits.reuse)?,
            adapter_depths: self.exits.adapter_depths.clone(),
        })
    }

    pub fn schedule(&self) -> Result<TrainSchedule> {
        if !(0.0..=1.0).contains(&self.train.decay_frac) {
            return Err(DytxError::Config("decay_frac must be in [0,1]".into()));
        }
        Ok(TrainSchedule {
            epochs_stage1: self.train.epochs_stage1,
            epochs_stage2: self.train.epochs_stage2,
            pairs_per_epoch: self.train.pairs_per_epoch,
            lr_heads: self.train.lr_heads,
            lr_backbone: self.train.lr_backbone,
            weight_decay: self.train.weight_decay,
            decay_frac: self.train.decay_frac,
            strategy: TrainStrategy::parse(&self.train.strategy)?,
            distill: DistillMode::parse(&self.train.distill)?,
            jitter: self.train.jitter,
            val_pairs: self.train.val_pairs,
            grad_clip: self.train.grad_clip,
        })
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        let w = LossWeights {
            l1: self.train.lambda_l1,
            giou: self.train.lambda_giou,
            score: self.train.lambda_score,
            imit: self.train.lambda_imit,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn policy(&self) -> Result<ExitPolicy> {
        parse_policy(&self.infer.policy, &self.infer.tau)
    }
}

/// Parse `adaptive`, `fixed:<k>` (1-based on the CLI surface), or
/// `random:<p0,p1,...>`.
pub fn parse_policy(spec: &str, tau: &[f64]) -> Result<ExitPolicy> {
    if spec == "adaptive" {
        return Ok(ExitPolicy::Adaptive { tau: tau.to_vec() });
    }
    if let Some(k) = spec.strip_prefix("fixed:") {
        let k: usize = k
            .parse()
            .map_err(|_| DytxError::Config(format!("bad fixed exit '{k}'")))?;
        if k == 0 {
            return Err(DytxError::Config("fixed exits are numbered from 1".into()));
        }
        return Ok(ExitPolicy::Fixed(k - 1));
    }
    if let Some(ps) = spec.strip_prefix("random:") {
        let probs: std::result::Result<Vec<f64>, _> =
            ps.split(',').map(|p| p.trim().parse::<f64>()).collect();
        let probs =
            probs.map_err(|_| DytxError::Config(format!("bad distribution '{ps}'")))?;
        return Ok(ExitPolicy::Random { probs });
    }
    Err(DytxError::Config(format!(
        "unknown policy '{spec}' (expected adaptive|fixed:<k>|random:<p,...>)"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = FileConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: FileConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.backbone_config().is_ok());
        assert!(cfg.schedule().is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<FileConfig>("[backbone]\nwidth = 64\n");
        assert!(err.is_err());
        let err = toml::from_str::<FileConfig>("[nonsense]\nx = 1\n");
        assert!(err.is_err());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg: FileConfig =
            toml::from_str("[exits]\nreuse = \"gated_sum\"\n[train]\nlambda_imit = 0.0\n")
                .unwrap();
        assert_eq!(cfg.exits_config().unwrap().reuse, ReuseMode::GatedSum);
        assert_eq!(cfg.loss_weights().unwrap().imit, 0.0);
        // untouched sections keep defaults
        assert_eq!(cfg.backbone.depth, 6);
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(
            parse_policy("fixed:1", &[]).unwrap(),
            ExitPolicy::Fixed(0)
        );
        assert!(matches!(
            parse_policy("adaptive", &[0.4, 0.5]).unwrap(),
            ExitPolicy::Adaptive { .. }
        ));
        assert_eq!(
            parse_policy("random:0.2,0.3,0.5", &[]).unwrap(),
            ExitPolicy::Random {
                probs: vec![0.2, 0.3, 0.5]
            }
        );
        assert!(parse_policy("sometimes", &[]).is_err());
        assert!(parse_policy("fixed:0", &[]).is_err());
    }
}
