use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    /// 1-based block index whose output residual stream is captured.
    pub mid_layer: usize,
    pub seed: u64,
}

impl LmConfig {
    /// The desk-scale default for a given vocabulary.
    pub fn toy(vocab_size: usize) -> Self {
        LmConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            vocab_size,
            context_len: 64,
            mid_layer: 2,
            seed: 0,
        }
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.context_len == 0 {
            return Err(Error::Config("LM dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.mid_layer < 1 || self.mid_layer > self.n_layers {
            return Err(Error::Config(format!(
                "mid_layer {} outside 1..={}",
                self.mid_layer, self.n_layers
            )));
        }
        Ok(())
    }
}
