//! Encoder-decoder transformer with context-masked cross-attention.

mod attention;
mod checkpoint;
mod generate;
mod layers;
mod params;
mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contextizer::ContextConfig;

pub use attention::{attention, attention_weights, coatt_mask, AttentionMask, MASK_BIAS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_FORMAT};
pub use generate::Strategy;
pub use params::{ParamId, Parameters};
pub use transformer::{log_softmax_rows, source_origin, BatchCache, BatchItem, ForwardTrace, Transformer};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("mask length {got} does not match expected {expected}")]
    MaskLength { expected: usize, got: usize },
    #[error("attention row {row} has no visible key")]
    NoVisibleKey { row: usize },
    #[error("empty sequence")]
    Empty,
    #[error("forced prefix of length {prefix} leaves no room under max_len {max_len}")]
    PrefixTooLong { prefix: usize, max_len: usize },
    #[error("parameter shapes do not match the configuration")]
    ShapeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalEncoding {
    Sinusoidal,
}

/// Which source positions decoder cross-attention may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossAttention {
    /// Context positions are hidden from the decoder.
    CoAttMask,
    /// Every non-PAD position is visible (plain encoder-decoder).
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub positional: PositionalEncoding,
    pub cross_attention: CrossAttention,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers_enc: 2,
            layers_dec: 2,
            heads: 4,
            d_model: 128,
            d_ff: 256,
            dropout: 0.1,
            max_positions: 256,
            vocab_size: 0,
            positional: PositionalEncoding::Sinusoidal,
            cross_attention: CrossAttention::CoAttMask,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return bad("d_model, heads and d_ff must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if self.layers_enc == 0 || self.layers_dec == 0 {
            return bad("at least one encoder and one decoder layer required");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive");
        }
        Ok(())
    }

    /// Also checks that the configured sequence lengths fit.
    pub fn validate_for(&self, ctx: &ContextConfig) -> Result<(), ModelError> {
        self.validate()?;
        let needed = ctx.max_src_len.max(ctx.max_tgt_len);
        if self.max_positions < needed {
            return Err(ModelError::InvalidConfig(format!(
                "max_positions {} is below the configured maximum length {needed}",
                self.max_positions
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, driven by a ChaCha8 stream seeded with `seed`.
    Train { seed: u64 },
}
