use serde::{Deserialize, Serialize};

use crate::attention::{NormMode, ScaleSharing};
use crate::error::{Error, Result};

/// Where a sub-layer's layer normalization sits relative to its residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residual {
    /// `LN(x + f(x))`
    Post,
    /// `x + f(LN(x))`, plus a final LN after the stack.
    Pre,
}

impl Residual {
    pub fn for_mode(mode: NormMode) -> Self {
        match mode {
            NormMode::PreLn => Residual::Pre,
            _ => Residual::Post,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub hidden_size: usize,
    pub dropout: f64,
    pub norm_mode: NormMode,
    pub residual: Residual,
    pub scale_sharing: ScaleSharing,
    pub vocab_size: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
}

impl ModelConfig {
    /// Defaults: 2 layers, 8 heads, width 256, FFN 512, dropout 0.25.
    pub fn new(vocab_size: usize, norm_mode: NormMode) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 8,
            d_model: 256,
            hidden_size: 512,
            dropout: 0.25,
            norm_mode,
            residual: Residual::for_mode(norm_mode),
            scale_sharing: ScaleSharing::PerHead,
            vocab_size,
            max_source_len: 64,
            max_target_len: 64,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.hidden_size == 0 {
            return fail(format!(
                "n_layers {}, n_heads {} and hidden_size {} must be positive",
                self.n_layers, self.n_heads, self.hidden_size
            ));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model {} must be even for sinusoidal positions", self.d_model));
        }
        if self.norm_mode == NormMode::AdjustQkNorm && self.head_dim() < 2 {
            return fail("zero-mean query/key normalization needs a head dimension of at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size < crate::corpus::RESERVED_TOKENS {
            return fail(format!("vocab_size {} below the reserved token count", self.vocab_size));
        }
        if self.max_source_len < 2 || self.max_target_len < 2 {
            return fail("maximum lengths must be at least 2".into());
        }
        Ok(())
    }

    /// Number of `g` scalars per attention block.
    pub fn scales_per_block(&self) -> usize {
        match (self.norm_mode.uses_scale(), self.scale_sharing) {
            (false, _) => 0,
            (true, ScaleSharing::PerHead) => self.n_heads,
            (true, ScaleSharing::Shared) => 1,
        }
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        let attn = 4 * (d * d + d) + self.scales_per_block();
        let ln = 2 * d;
        let ffn = d * self.hidden_size + self.hidden_size + self.hidden_size * d + d;
        let enc = attn + ffn + 2 * ln;
        let dec = 2 * attn + ffn + 3 * ln;
        let finals = if self.residual == Residual::Pre { 2 * ln } else { 0 };
        v * d + self.n_layers * (enc + dec) + finals + d * v + v
    }
}
