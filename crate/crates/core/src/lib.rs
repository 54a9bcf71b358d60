//! Context-aware neural machine translation for dialogue: corpus handling,
//! context-extended encoding, a small transformer with context-masked
//! cross-attention, training, and BLEU/CXMI evaluation.

pub mod cli;
pub mod contextizer;
pub mod corpus;
pub mod metrics;
pub mod model;
pub mod tokenizer;
pub mod trainer;
