use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positional scheme applied inside attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosScheme {
    Rotary,
    Alibi,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub pos_scheme: PosScheme,
    pub rotary_base: f64,
    pub max_position: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ff: 64,
            vocab_size: 64,
            pos_scheme: PosScheme::Rotary,
            rotary_base: 10000.0,
            max_position: 4096,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_position", self.max_position),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 4, got {}",
                self.vocab_size
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.pos_scheme == PosScheme::Rotary && !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary embeddings need an even head_dim, got {}",
                self.head_dim()
            )));
        }
        if !(self.rotary_base.is_finite() && self.rotary_base > 0.0) {
            return Err(Error::Config("rotary_base must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count: embedding and head, two norm gains per
    /// layer plus the final one, four attention projections and a gated MLP.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 3 * d * self.d_ff + 2 * d;
        2 * self.vocab_size * d + d + self.n_layers * per_layer
    }
}
