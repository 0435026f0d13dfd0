use serde::{Deserialize, Serialize};

use crate::attention::RopeConfig;
use crate::error::{Error, Result};

/// Byte-level vocabulary.
pub const VOCAB_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub mlp_ratio: usize,
    pub rope_base: f64,
    pub interpolation_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            head_dim: 32,
            vocab_size: VOCAB_SIZE,
            max_context: 4096,
            mlp_ratio: 4,
            rope_base: 10_000.0,
            interpolation_scale: 1.0,
        }
    }
}

impl ModelConfig {
    /// A config with `d_model` split evenly over `n_heads`.
    pub fn with_dims(d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            d_model,
            n_layers,
            n_heads,
            head_dim: d_model.checked_div(n_heads).unwrap_or(0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::Config(format!("vocab size must be {VOCAB_SIZE}")));
        }
        if self.n_heads == 0 || self.n_layers == 0 || self.head_dim == 0 {
            return Err(Error::Config("layers, heads and head dim must be positive".into()));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config("head dim must be even for rotary encoding".into()));
        }
        if self.mlp_ratio == 0 || self.max_context == 0 {
            return Err(Error::Config("mlp ratio and max context must be positive".into()));
        }
        self.rope().validate()
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            base: self.rope_base,
            interpolation_scale: self.interpolation_scale,
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    /// Longest sequence the (possibly interpolated) positions cover.
    pub fn context_limit(&self) -> usize {
        (self.max_context as f64 * self.interpolation_scale).floor() as usize
    }
}
