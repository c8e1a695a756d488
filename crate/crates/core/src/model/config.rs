use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    LearnedAbsolute,
    Rotary,
}

/// Architecture hyperparameters of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub positional: PositionalKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::compact()
    }
}

impl ModelConfig {
    /// Eight layers at width 128; trains in minutes on a multi-core machine.
    pub fn desk() -> Self {
        Self {
            n_layers: 8,
            n_heads: 4,
            d_model: 128,
            d_ffn: 512,
            vocab_size: 512,
            max_seq_len: 128,
            positional: PositionalKind::LearnedAbsolute,
        }
    }

    /// Eight layers at width 64 with a 256-token vocabulary; the default for
    /// experiment runs, sized for a single CPU core.
    pub fn compact() -> Self {
        Self {
            n_layers: 8,
            n_heads: 4,
            d_model: 64,
            d_ffn: 256,
            vocab_size: 256,
            max_seq_len: 64,
            positional: PositionalKind::LearnedAbsolute,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ffn < self.d_model {
            return Err(Error::invalid("d_ffn must be at least d_model"));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be at least 2"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::invalid("max_seq_len must be positive"));
        }
        if self.positional == PositionalKind::Rotary && self.head_dim() % 2 != 0 {
            return Err(Error::invalid("rotary embeddings need an even head dimension"));
        }
        Ok(())
    }
}
