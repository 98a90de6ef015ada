//! Command-line pipeline around `radvl-core`: corpus generation, staged
//! training with checkpoints, evaluation, inference and ablations.

pub mod ablate;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod infer;
pub mod pipeline;

pub use checkpoint::Checkpoint;
pub use commands::{Global, Layout};
pub use config::RunConfig;
pub use error::{CliError, Result};
pub use pipeline::{Component, StageCache};
