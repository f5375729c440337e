use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizers::TokenizerKind;

/// How the squared reconstruction error of one patch is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Squared Frobenius norm of the residual, averaged over masked patches.
    #[default]
    Frobenius,
    /// Mean squared entry per patch, averaged over masked patches.
    PerEntry,
}

/// Architecture and optimization settings of a masked autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeConfig {
    pub tokenizer: TokenizerKind,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_norm: LossNorm,
    /// Interpolate the schedule per mini-batch instead of once per epoch.
    pub per_step_schedule: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MaeConfig {
    /// Small configuration that trains on a laptop CPU in minutes.
    pub fn desk() -> Self {
        Self {
            tokenizer: TokenizerKind::Bilinear,
            embed_dim: 32,
            encoder_depth: 2,
            encoder_heads: 2,
            decoder_dim: 16,
            decoder_depth: 1,
            decoder_heads: 2,
            mask_ratio: 0.5,
            epochs: 300,
            warmup_epochs: 30,
            base_lr: 1e-2,
            weight_decay: 1e-2,
            batch_size: 64,
            seed: 0,
            loss_norm: LossNorm::Frobenius,
            per_step_schedule: false,
        }
    }

    /// Full-size configuration (400 regions, 17 networks).
    pub fn full_scale() -> Self {
        Self {
            embed_dim: 256,
            encoder_depth: 4,
            encoder_heads: 4,
            decoder_dim: 64,
            decoder_depth: 1,
            decoder_heads: 2,
            epochs: 4000,
            warmup_epochs: 400,
            batch_size: 1024,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: String| Err(Error::Config(format!("mae.{field}: {why}")));
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail("mask_ratio", format!("{} is not in (0, 1)", self.mask_ratio));
        }
        for (field, width, heads) in [
            ("encoder_heads", self.embed_dim, self.encoder_heads),
            ("decoder_heads", self.decoder_dim, self.decoder_heads),
        ] {
            if width == 0 {
                return fail(field, "width must be positive".into());
            }
            if heads == 0 || width % heads != 0 {
                return fail(field, format!("{heads} heads do not divide width {width}"));
            }
        }
        if self.encoder_depth == 0 {
            return fail("encoder_depth", "must be at least 1".into());
        }
        if self.decoder_depth == 0 {
            return fail("decoder_depth", "must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs", "must be at least 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return fail(
                "warmup_epochs",
                format!("{} must be below epochs ({})", self.warmup_epochs, self.epochs),
            );
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return fail("base_lr", format!("{} is not a non-negative number", self.base_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay", format!("{} is not a non-negative number", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        if self.seed > i64::MAX as u64 {
            return fail("seed", "must fit in a signed 64-bit integer".into());
        }
        Ok(())
    }

    /// Differences in fields that determine the parameter layout.
    pub fn architecture_mismatch(&self, other: &MaeConfig) -> Option<String> {
        let mut diffs = Vec::new();
        let mut check = |name: &str, a: String, b: String| {
            if a != b {
                diffs.push(format!("{name}: {a} vs {b}"));
            }
        };
        check("tokenizer", self.tokenizer.to_string(), other.tokenizer.to_string());
        check("embed_dim", self.embed_dim.to_string(), other.embed_dim.to_string());
        check("encoder_depth", self.encoder_depth.to_string(), other.encoder_depth.to_string());
        check("encoder_heads", self.encoder_heads.to_string(), other.encoder_heads.to_string());
        check("decoder_dim", self.decoder_dim.to_string(), other.decoder_dim.to_string());
        check("decoder_depth", self.decoder_depth.to_string(), other.decoder_depth.to_string());
        check("decoder_heads", self.decoder_heads.to_string(), other.decoder_heads.to_string());
        if diffs.is_empty() {
            None
        } else {
            Some(diffs.join(", "))
        }
    }
}
