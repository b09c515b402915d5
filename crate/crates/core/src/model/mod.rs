//! Byte-level decoder-only transformer.

pub mod checkpoint;
mod lm;
pub mod tokenizer;

pub use lm::{BoundModel, LanguageModel, LogProbSummary, LogProbVar, ModelConfig, Sample};
pub use tokenizer::{detokenize, tokenize, TokenId, BYTE_VOCAB};
