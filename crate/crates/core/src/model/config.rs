use serde::{Deserialize, Serialize};

use crate::data::RESERVED_TOKENS;
use crate::nn::{geglu_hidden, plain_hidden};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    /// RMSNorm, GEGLU and rotary attention in every encoder block.
    Grr,
    /// LayerNorm, plain GELU feedforward and a learned absolute position
    /// table added after patchify.
    Baseline,
}

impl std::fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderVariant::Grr => "grr",
            EncoderVariant::Baseline => "baseline",
        })
    }
}

/// Architecture hyperparameters. Defaults are the full-size model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks_per_submodel: usize,
    pub ff_scaler: f64,
    pub geglu_scaler: f64,
    pub context_len: usize,
    pub vocab_size: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub gen_pool_queries: usize,
    pub encoder_variant: EncoderVariant,
    pub dropout: f64,
    pub rope_base: f64,
    /// Feedforward sublayer between self- and cross-attention in each
    /// multimodal decoder block.
    pub multimodal_self_ff: bool,
    pub temperature_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 768,
            heads: 12,
            blocks_per_submodel: 12,
            ff_scaler: 4.0,
            geglu_scaler: 2.7,
            context_len: 64,
            vocab_size: 32_102,
            image_size: 288,
            patch_size: 18,
            channels: 3,
            gen_pool_queries: 64,
            encoder_variant: EncoderVariant::Grr,
            dropout: 0.15,
            rope_base: 10_000.0,
            multimodal_self_ff: true,
            temperature_init: 0.07,
        }
    }
}

impl ModelConfig {
    /// Desk-scale model used by the examples and the learning test.
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks_per_submodel: 2,
            context_len: 16,
            vocab_size: 260,
            image_size: 32,
            patch_size: 8,
            gen_pool_queries: 16,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: EncoderVariant) -> Self {
        self.encoder_variant = variant;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn geglu_hidden(&self) -> usize {
        geglu_hidden(self.d_model, self.geglu_scaler)
    }

    pub fn ff_hidden(&self) -> usize {
        plain_hidden(self.d_model, self.ff_scaler)
    }

    /// Checks every invariant, naming the first offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("model.{key}: {why}")));
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("blocks_per_submodel", self.blocks_per_submodel),
            ("context_len", self.context_len),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("gen_pool_queries", self.gen_pool_queries),
        ];
        for (key, v) in positive {
            if v == 0 {
                return bad(key, "must be positive".into());
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(
                "heads",
                format!("{} does not divide d_model {}", self.heads, self.d_model),
            );
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(
                "heads",
                format!("head dim {} must be even for rotary embeddings", self.head_dim()),
            );
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(
                "patch_size",
                format!(
                    "{} does not divide image_size {}",
                    self.patch_size, self.image_size
                ),
            );
        }
        if self.gen_pool_queries != self.context_len {
            return bad(
                "gen_pool_queries",
                format!("must equal context_len {}", self.context_len),
            );
        }
        if self.context_len < 4 {
            return bad("context_len", "needs room for BOS, a token, EOS and CLS".into());
        }
        if self.vocab_size <= RESERVED_TOKENS {
            return bad(
                "vocab_size",
                format!("must exceed the {RESERVED_TOKENS} reserved ids"),
            );
        }
        for (key, v) in [("ff_scaler", self.ff_scaler), ("geglu_scaler", self.geglu_scaler)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, format!("must be positive, got {v}"));
            }
        }
        if self.geglu_hidden() == 0 || self.ff_hidden() == 0 {
            return bad("d_model", "feedforward hidden width rounds to zero".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("must be in [0, 1), got {}", self.dropout));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return bad("rope_base", format!("must be positive, got {}", self.rope_base));
        }
        if !(self.temperature_init > 0.0 && self.temperature_init.is_finite()) {
            return bad(
                "temperature_init",
                format!("must be positive, got {}", self.temperature_init),
            );
        }
        Ok(())
    }
}
