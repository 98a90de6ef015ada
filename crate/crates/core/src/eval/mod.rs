//! Text, image-distribution and classification metrics.

mod classify;
mod fid;
mod report;
mod tasks;
mod text;

pub use classify::{auroc, finding_f1, vqa_accuracy, ClassifyError, Prf, ScoredBinary};
pub use fid::{frechet_distance, CloudSource, FeatureCloud, FidError, SHRINKAGE};
pub use report::MetricsReport;
pub use text::{align_exact, bleu, bleu_with_flag, cider, lcs_len, meteor_lite, rouge_l, CiderError, CiderIdf};
pub use tasks::{
    eval_images, eval_reports, eval_vqa, evaluate, EvalError, EvalOptions, System, TaskOutcome, TaskSelection, Transcript,
};
