use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Architecture and seeding for the micro transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub context_len: usize,
    /// Reserved leading token slots carrying the image attributes; 0 for the
    /// text-only reference model.
    pub prefix_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults sized so a reference/conditional pair trains in minutes on a
    /// laptop core while still separating the two objectives.
    pub fn micro(vocab_size: usize, prefix_len: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            context_len: 256,
            prefix_len,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be >= 2"));
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::invalid("d_model and n_heads must be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len < self.prefix_len + 2 {
            return Err(Error::invalid(format!(
                "context_len {} must be >= prefix_len {} + 2",
                self.context_len, self.prefix_len
            )));
        }
        Ok(())
    }
}
