//! Unified text/image vocabulary, sequence layouts, and a small decoder-only
//! transformer trained in two stages.

mod decode;
mod loss;
mod model;
mod sequence;
mod train;
mod vocab;

pub use decode::{generate, greedy_pick, next_token_probs, DecodeConfig, DecodeMode, Generation, KvCache};
pub use loss::{
    batch_nll, max_drift, position_nlls, reg_loss, reg_value, sequence_nll, stage1_loss, task_loss, total_loss,
    NllWeights,
};
pub use model::{LmConfig, LmModel};
pub use sequence::{assemble_condition, assemble_sequence, Prompting, SequenceParts, TokenSequence};
pub use train::{
    stage1_pairs, train_stage1, train_stage2, StageCurveRow, StageRun, TaskMix, TokenizedCorpus, TrainingConfig,
};
pub use vocab::{build_vocab, default_vocab, Modality, Special, UnifiedVocab, SPECIALS};

use thiserror::Error;

use crate::tensor::EngineError;

#[derive(Debug, Error)]
pub enum LmError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("sequence layout: {0}")]
    Layout(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String, last_good: Option<Box<LmModel>> },
}
