//! Model, loss and optimiser hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub vtc: f64,
    pub mbta: f64,
    pub mbca: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vtc: 1.0,
            mbta: 1.0,
            mbca: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// How the temporal output projection starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalInit {
    #[default]
    Zero,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Backbone visual layers (L).
    pub layers: usize,
    /// Branch layers (K).
    pub branch_layers: usize,
    /// Hidden width (D).
    pub width: usize,
    pub heads: usize,
    /// Frames per video (T).
    pub frames: usize,
    /// Patches per frame (N).
    pub patches: usize,
    /// Raw patch feature width (P).
    pub patch_dim: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    pub text_layers: usize,
    /// Joint embedding width (E).
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    pub init_std: f64,
    pub ln_eps: f64,
    /// Tube mask ratio (rho).
    pub mask_ratio: f64,
    /// Contrastive temperature (tau); logits are `cos / tau`.
    pub temperature: f64,
    pub loss_weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub temporal_init: TemporalInit,
    /// Ablation: keep every temporal projection at zero and untrainable.
    pub freeze_temporal_proj: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            branch_layers: 4,
            width: 64,
            heads: 4,
            frames: 6,
            patches: 16,
            patch_dim: 16,
            vocab_size: 64,
            text_len: 16,
            text_layers: 2,
            embed_dim: 32,
            mlp_ratio: 4,
            init_std: 0.02,
            ln_eps: 1e-5,
            mask_ratio: 0.7,
            temperature: 0.01,
            loss_weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            temporal_init: TemporalInit::Zero,
            freeze_temporal_proj: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Toy,
    PaperTable7,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::PaperTable7 => "paper-table7",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper-table7" => Ok(Preset::PaperTable7),
            other => Err(Error::Config(format!("unknown preset {other}"))),
        }
    }
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => Self::default(),
            // Pretraining column of the reference hyperparameter table:
            // 24 backbone layers, 4 branch layers, AdamW (0.9, 0.98),
            // weight decay 0.05, lr 2e-6, batch 640.
            Preset::PaperTable7 => Self {
                layers: 24,
                branch_layers: 4,
                optimizer: OptimizerConfig {
                    lr: 2e-6,
                    beta1: 0.9,
                    beta2: 0.98,
                    eps: 1e-8,
                    weight_decay: 0.05,
                },
                batch_size: 640,
                ..Self::default()
            },
        }
    }

    /// A small configuration for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            layers: 3,
            branch_layers: 2,
            width: 16,
            heads: 2,
            frames: 3,
            patches: 4,
            patch_dim: 4,
            vocab_size: 8,
            text_len: 6,
            text_layers: 1,
            embed_dim: 8,
            mlp_ratio: 2,
            batch_size: 2,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    /// |M| = round(rho · N).
    pub fn masked_count(&self) -> usize {
        masked_count(self.patches, self.mask_ratio)
    }

    /// First backbone layer consumed by the branch (L − K).
    pub fn branch_source_layer(&self) -> usize {
        self.layers - self.branch_layers
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.branch_layers < 1 {
            problems.push("branch_layers must be >= 1".to_string());
        }
        if self.branch_layers + 1 > self.layers {
            problems.push(format!(
                "branch_layers + 1 ({}) exceeds layers ({})",
                self.branch_layers + 1,
                self.layers
            ));
        }
        for (name, v) in [
            ("width", self.width),
            ("heads", self.heads),
            ("frames", self.frames),
            ("patches", self.patches),
            ("patch_dim", self.patch_dim),
            ("vocab_size", self.vocab_size),
            ("text_len", self.text_len),
            ("text_layers", self.text_layers),
            ("embed_dim", self.embed_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.heads > 0 && !self.width.is_multiple_of(self.heads) {
            problems.push(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            problems.push(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        } else if self.patches > 0 && self.masked_count() >= self.patches {
            problems.push(format!(
                "mask_ratio {} leaves no unmasked patch of {}",
                self.mask_ratio, self.patches
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            problems.push("temperature must be positive".into());
        }
        if !(self.init_std > 0.0 && self.ln_eps > 0.0) {
            problems.push("init_std and ln_eps must be positive".into());
        }
        let w = self.loss_weights;
        if [w.vtc, w.mbta, w.mbca].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            problems.push("loss weights must be finite and non-negative".into());
        }
        let o = self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            problems.push("optimizer needs lr > 0 and betas in [0, 1)".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Names of branch-compatibility fields that differ from `other`.
    pub fn branch_incompatibilities(&self, other: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        let pairs = [
            ("branch_layers", self.branch_layers, other.branch_layers),
            ("width", self.width, other.width),
            ("heads", self.heads, other.heads),
            ("frames", self.frames, other.frames),
            ("patches", self.patches, other.patches),
            ("embed_dim", self.embed_dim, other.embed_dim),
            ("mlp_ratio", self.mlp_ratio, other.mlp_ratio),
        ];
        for (name, a, b) in pairs {
            if a != b {
                out.push(name.to_string());
            }
        }
        out
    }
}

pub fn masked_count(patches: usize, ratio: f64) -> usize {
    (ratio * patches as f64).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_reference_values() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.branch_layers, 4);
        assert_eq!(c.mask_ratio, 0.7);
        assert_eq!(c.temperature, 0.01);
        assert_eq!(c.loss_weights, LossWeights::default());
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::preset(Preset::PaperTable7).validate().unwrap();
    }

    #[test]
    fn rejects_too_many_branch_layers() {
        let c = ModelConfig {
            layers: 4,
            branch_layers: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_mask_without_survivors() {
        let c = ModelConfig {
            patches: 2,
            mask_ratio: 0.8,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        assert_eq!(masked_count(10, 0.7), 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"layers": 6, "bogus": 1}"#);
        assert!(err.is_err());
        let partial: ModelConfig = serde_json::from_str(r#"{"layers": 8}"#).unwrap();
        assert_eq!(partial.layers, 8);
        assert_eq!(partial.width, 64);
    }
}
