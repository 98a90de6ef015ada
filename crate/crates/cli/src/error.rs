use std::path::Path;

use radvl_core::corpus::CorpusError;
use radvl_core::eval::EvalError;
use radvl_core::lm::LmError;
use radvl_core::tensor::EngineError;
use radvl_core::tokenizer::TokenizerError;

/// Everything a command can fail with. Each variant maps to one exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("missing dependency: {0}")]
    Missing(String),
    #[error("lineage mismatch: {0}")]
    Lineage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("training failure: {0}")]
    Training(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("refusing to overwrite {0} (pass --force)")]
    Exists(String),
    #[error("{0}")]
    Format(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Missing(_) | CliError::Lineage(_) => 3,
            CliError::Numeric(_) | CliError::Training(_) => 4,
            CliError::Io { .. } | CliError::Exists(_) | CliError::Format(_) => 5,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { path, source } => CliError::Io { path, source },
            CorpusError::Format(m) => CliError::Format(m),
            CorpusError::Config(m) | CorpusError::InvalidFinding(m) => CliError::Config(m),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TokenizerError::TrainingFailure(m) => CliError::Training(m),
            TokenizerError::Engine(e) => e.into(),
            TokenizerError::Shape(m) | TokenizerError::Contract(m) => CliError::Config(m),
        }
    }
}

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        match e {
            LmError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            LmError::Engine(e) => e.into(),
            LmError::Vocab(m) | LmError::Layout(m) | LmError::Contract(m) => CliError::Config(m),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Lm(e) => e.into(),
            EvalError::Tokenizer(e) => e.into(),
            EvalError::Metric(m) => CliError::Numeric(m),
        }
    }
}
