//! Single-input inference against a trained run.

use std::path::{Path, PathBuf};

use radvl_core::corpus::{io, tokenize, Task};
use radvl_core::eval::Transcript;
use radvl_core::lm::{DecodeMode, UnifiedVocab};
use radvl_core::seed;
use sha2::{Digest, Sha256};

use crate::commands::{load_corpus, load_models, Global, Layout};
use crate::error::{CliError, Result};

/// Largest tolerated fraction of out-of-vocabulary words in text input.
pub const MAX_UNKNOWN_FRACTION: f64 = 0.5;

pub struct InferRequest<'a> {
    /// Run directory holding `corpus/` and `checkpoints/`.
    pub run: &'a Path,
    pub task: Task,
    /// Image path for image-conditioned tasks, report text otherwise.
    pub input: &'a str,
    pub question: Option<&'a str>,
}

#[derive(Debug)]
pub struct InferOutcome {
    pub transcript: Transcript,
    pub text: Option<String>,
    pub image: Option<PathBuf>,
}

/// Tokenises free text against the vocabulary, dropping unknown words.
/// Rejects input that is empty or mostly unknown.
pub fn known_words(vocab: &UnifiedVocab, text: &str, what: &str) -> Result<Vec<String>> {
    let words = tokenize(text);
    if words.is_empty() {
        return Err(CliError::Input(format!("{what} is empty")));
    }
    let unknown: Vec<&String> = words.iter().filter(|w| vocab.word_id(w).is_none()).collect();
    let fraction = unknown.len() as f64 / words.len() as f64;
    if fraction > MAX_UNKNOWN_FRACTION {
        return Err(CliError::Input(format!(
            "{what}: {} of {} words are outside the vocabulary ({unknown:?})",
            unknown.len(),
            words.len()
        )));
    }
    if !unknown.is_empty() {
        eprintln!("warning: ignoring unknown words {unknown:?}");
    }
    Ok(words.into_iter().filter(|w| vocab.word_id(w).is_some()).collect())
}

fn read_image(path: &Path, height: usize, width: usize) -> Result<Vec<f64>> {
    let (h, w, pixels) = io::read_pgm(path).map_err(|e| CliError::Input(format!("unreadable image: {e}")))?;
    if (h, w) != (height, width) {
        return Err(CliError::Input(format!("{} is {h}×{w}; the tokenizer expects {height}×{width}", path.display())));
    }
    Ok(pixels)
}

fn input_id(task: Task, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(task.name());
    for p in parts {
        h.update([0]);
        h.update(p.as_bytes());
    }
    format!("{}-{}", task.name(), &hex::encode(h.finalize())[..12])
}

/// Runs one request. Outputs go to `g.out`: generated films as
/// `<id>.pgm` (never overwritten without `--force`) and every request
/// appended to `transcripts.jsonl`.
pub fn cmd_infer(g: &Global, req: &InferRequest<'_>) -> Result<InferOutcome> {
    let layout = Layout::new(req.run);
    let corpus = load_corpus(&layout.corpus())?;
    let models = load_models(&layout, &corpus, None)?;
    let sys = models.system();
    let opts = &g.config.eval.options;
    let (height, width) = (models.tokenizer.arch.height, models.tokenizer.arch.width);
    let id = input_id(req.task, &[req.input, req.question.unwrap_or("")]);
    let mut outcome = match req.task {
        Task::CxrToReport => {
            let pixels = read_image(Path::new(req.input), height, width)?;
            let (cond, g) = sys.describe(&pixels, opts)?;
            let text = models.vocab.decode_words(&g.generated).join(" ");
            let t = Transcript {
                id,
                task: req.task,
                condition: cond.ids,
                output_ids: g.generated,
                output_text: Some(text.clone()),
                output_image_path: None,
                truncated: g.truncated,
                pixels: Vec::new(),
            };
            InferOutcome { transcript: t, text: Some(text), image: None }
        }
        Task::ReportToCxr => {
            let report = known_words(&models.vocab, req.input, "report")?;
            let target = g.out.join(format!("{id}.pgm"));
            if target.exists() && !g.force {
                return Err(CliError::Exists(target.display().to_string()));
            }
            let mut rng = seed::rng_for(g.config.seed_for("infer"), &id, 0);
            let (cond, ids, pixels) = sys.draw(&report, DecodeMode::Sample, opts, &mut rng)?;
            io::write_pgm(&target, &pixels, height, width, &format!("generated {id}"))?;
            let t = Transcript {
                id,
                task: req.task,
                condition: cond.ids,
                output_ids: ids,
                output_text: None,
                output_image_path: Some(target.display().to_string()),
                truncated: false,
                pixels,
            };
            InferOutcome { transcript: t, text: None, image: Some(target) }
        }
        Task::Vqa => {
            let question = req.question.ok_or_else(|| CliError::Input("vqa needs --question".into()))?;
            let pixels = read_image(Path::new(req.input), height, width)?;
            let q = known_words(&models.vocab, question, "question")?;
            let (cond, g, _) = sys.answer(&pixels, &q, opts)?;
            let text = models.vocab.decode_words(&g.generated).join(" ");
            let t = Transcript {
                id,
                task: req.task,
                condition: cond.ids,
                output_ids: g.generated,
                output_text: Some(text.clone()),
                output_image_path: None,
                truncated: g.truncated,
                pixels: Vec::new(),
            };
            InferOutcome { transcript: t, text: Some(text), image: None }
        }
    };
    std::fs::create_dir_all(&g.out).map_err(|e| CliError::io(&g.out, e))?;
    io::append_jsonl(&g.out.join("transcripts.jsonl"), &outcome.transcript)?;
    outcome.transcript.pixels.clear();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use radvl_core::lm::default_vocab;

    #[test]
    fn mostly_unknown_text_rejected() {
        let v = default_vocab(8).unwrap();
        let err = known_words(&v, "zebra quokka nodule", "report").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("zebra"));
    }

    #[test]
    fn half_unknown_is_tolerated_and_filtered() {
        let v = default_vocab(8).unwrap();
        let words = known_words(&v, "zebra nodule", "report").unwrap();
        assert_eq!(words, vec!["nodule".to_string()]);
        assert!(known_words(&v, "   ", "report").is_err());
    }

    #[test]
    fn input_ids_are_stable_and_distinct() {
        let a = input_id(Task::ReportToCxr, &["x", ""]);
        assert_eq!(a, input_id(Task::ReportToCxr, &["x", ""]));
        assert_ne!(a, input_id(Task::ReportToCxr, &["x", "y"]));
        assert!(a.starts_with("report_to_cxr-"));
    }
}
