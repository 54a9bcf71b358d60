//! Checkpoint file: one JSON header line, then every tensor as little-endian
//! `f32` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, Parameters, Transformer};
use crate::contextizer::ContextConfig;
use crate::tokenizer::{TokenizerError, Vocabulary};

pub const CHECKPOINT_FORMAT: &str = "ctxnmt-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("unsupported checkpoint format {0:?}")]
    Format(String),
    #[error("vocabulary hash mismatch: header {header}, embedded {embedded}")]
    VocabHash { header: String, embedded: String },
    #[error("tensor data has {got} bytes, expected {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("embedded vocabulary: {0}")]
    Vocab(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    model: ModelConfig,
    vocab_hash: String,
    context: ContextConfig,
    vocab: String,
    tensors: Vec<TensorEntry>,
}

/// A trained model with the vocabulary and context configuration it was
/// trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Transformer,
    pub vocab: Vocabulary,
    pub context: ContextConfig,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            model: self.model.config().clone(),
            vocab_hash: self.vocab.content_hash(),
            context: self.context,
            vocab: self.vocab.to_file_string(),
            tensors: params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: [t.nrows(), t.ncols()],
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serialisation");
        out.push(b'\n');
        for t in params.tensors() {
            for &v in t.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Header("missing header line".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(header.format));
        }
        let vocab = Vocabulary::from_file_string(&header.vocab, "checkpoint")?;
        let embedded = vocab.content_hash();
        if embedded != header.vocab_hash {
            return Err(CheckpointError::VocabHash {
                header: header.vocab_hash,
                embedded,
            });
        }
        let mut params: Parameters = Transformer::parameter_template(&header.model);
        let declared: Vec<(&str, [usize; 2])> = header.tensors.iter().map(|e| (e.name.as_str(), e.shape)).collect();
        let expected: Vec<(&str, [usize; 2])> = params.iter().map(|(n, t)| (n, [t.nrows(), t.ncols()])).collect();
        if declared != expected {
            return Err(ModelError::ShapeMismatch.into());
        }
        let data = &bytes[nl + 1..];
        let expected_len = params.num_scalars() * 4;
        if data.len() != expected_len {
            return Err(CheckpointError::DataLength {
                expected: expected_len,
                got: data.len(),
            });
        }
        let mut chunks = data.chunks_exact(4);
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                let c = chunks.next().expect("length checked");
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
            }
        }
        let model = Transformer::from_parameters(header.model, params)?;
        Ok(Checkpoint {
            model,
            vocab,
            context: header.context,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
