//! Procedural pseudo-radiograph corpus: rendered films, grammar reports,
//! question/answer items and instruction templates, all with exact ground
//! truth.

mod build;
pub mod findings;
pub mod grammar;
pub mod instructions;
pub mod io;
pub mod render;
pub mod vqa;

pub use build::{
    build_corpus, default_frequencies, generate_samples, Corpus, CorpusConfig, CorpusItem, CorpusManifest,
    FrequencyTable, PairRecord, Sample, VqaRecord,
};
pub use findings::{FindingKind, FindingLabel, FindingSpec, LabelSet, Severity, Side};
pub use grammar::{detokenize, extract_findings, extract_from_tokens, render_report, tokenize, Report, VOCAB};
pub use instructions::{template, templates, InstructionTemplate, Task};
pub use render::{generate_image, ImageSample, Split};
pub use vqa::{make_vqa, QuestionFamily, VqaItem};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid finding: {0}")]
    InvalidFinding(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
}
