//! SFT and DPO-family training objectives on a tiny byte-level language
//! model, with a from-scratch reverse-mode autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tensors, the tape, and the finite-difference oracle.
//! - [`model`]: byte tokenizer, decoder-only transformer, checkpoints.
//! - [`objectives`]: raw SFT, SFT-using-DPO, MinorSFT, DPO, MinorDPO, the
//!   implicit reward, the MinorSFT coefficient and the deviation metric.
//! - [`data`]: JSONL corpora, batching, and a synthetic corpus generator.
//! - [`trainer`]: schedule, optimizers, the training loop, and multi-run
//!   comparison with CSV/JSON export.

pub mod autodiff;
pub mod data;
mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod objectives;
pub mod trainer;

pub use autodiff::{ParamSet, Tape, Tensor, Var};
pub use data::{Batch, Corpus, PreferencePair, PreferenceRecord, SftRecord};
pub use error::{Error, Result};
pub use model::{LanguageModel, LogProbSummary, ModelConfig, Sample};
pub use objectives::{Beta, DeviationReport, Objective, SampleDiagnostics};
pub use trainer::{compare, train, CompareReport, RunLog, RunSpec, StepRecord, TrainConfig, Trainer};
