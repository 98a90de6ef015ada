//! Discrete image tokenizer: patch encoder, nearest-code quantiser, decoder,
//! the pixel/edge/feature reconstruction loss and the frozen feature
//! encoder φ it relies on.

mod loss;
mod phi;
mod train;
mod vq;

pub use loss::{clinical_recon_loss, recon_parts, LossWeights, ReconParts, ReconVars};
pub use phi::{phi_auroc, pretrain_phi, FeatureEncoder, PhiConfig, PhiOutput, PhiReport, FEATURE_DIM};
pub use train::{
    code_usage, curve_csv, evaluate_reconstruction, train_tokenizer, CurveRow, TokenizerRun, TokenizerTrainConfig,
};
pub use vq::{nearest_codes, quantize, Quantized, TokenGrid, TokenizerArch, VqTokenizer};

use crate::tensor::EngineError;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite {
        step: usize,
        detail: String,
        /// Parameters before the failing update, when available.
        last_good: Option<Box<VqTokenizer>>,
    },
    #[error("training failure: {0}")]
    TrainingFailure(String),
}
