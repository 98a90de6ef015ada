//! Scoring a trained tokenizer + LM on the three tasks of a corpus split.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classify::{auroc, finding_f1, vqa_accuracy, ScoredBinary};
use super::fid::{frechet_distance, CloudSource, FeatureCloud};
use super::report::MetricsReport;
use super::text::{bleu, cider, meteor_lite, rouge_l};
use crate::corpus::findings::labels_of;
use crate::corpus::{detokenize, template, Corpus, QuestionFamily, Split, Task};
use crate::lm::{
    assemble_condition, generate, next_token_probs, DecodeConfig, DecodeMode, LmError, LmModel, Prompting,
    SequenceParts, TokenSequence, UnifiedVocab,
};
use crate::seed;
use crate::tokenizer::{FeatureEncoder, TokenizerError, VqTokenizer};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{0}")]
    Metric(String),
}

/// The models under evaluation.
pub struct System<'a> {
    pub vocab: &'a UnifiedVocab,
    pub model: &'a LmModel,
    pub tokenizer: &'a VqTokenizer,
    pub phi: &'a FeatureEncoder,
    /// Prompt with instruction templates; false pads them out, matching a
    /// model fine-tuned without instructions.
    pub instructions: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Instruction template used for every prompt.
    pub template_id: usize,
    pub max_report_len: usize,
    pub max_answer_len: usize,
    /// Sampling temperature for report→image generation.
    pub image_temperature: f64,
    /// Items per task (0 = the whole split).
    pub limit: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { template_id: 0, max_report_len: 48, max_answer_len: 4, image_temperature: 1.0, limit: 0 }
    }
}

/// One decoded item, as written to a transcript.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub task: Task,
    pub condition: Vec<usize>,
    pub output_ids: Vec<usize>,
    /// Decoded words for text tasks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_text: Option<String>,
    /// Path of the written image for report→image, filled in by the caller.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_image_path: Option<String>,
    pub truncated: bool,
    #[serde(skip)]
    pub pixels: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TaskOutcome {
    pub metrics: BTreeMap<String, f64>,
    pub count: usize,
    pub transcripts: Vec<Transcript>,
}

impl System<'_> {
    fn prompting(&self, task: Task, opts: &EvalOptions) -> Result<Prompting, EvalError> {
        let t = template(task, opts.template_id)
            .ok_or_else(|| EvalError::Metric(format!("no template {} for {task}", opts.template_id)))?;
        Ok(if self.instructions { Prompting::Instructed(t) } else { Prompting::Padded(t) })
    }

    fn check(&self) -> Result<(), EvalError> {
        if self.vocab.codebook_size() != self.tokenizer.arch.codebook_size {
            return Err(EvalError::Metric(format!(
                "vocabulary has {} image ids but the codebook has {} codes",
                self.vocab.codebook_size(),
                self.tokenizer.arch.codebook_size
            )));
        }
        Ok(())
    }

    fn image_len(&self) -> usize {
        self.tokenizer.arch.tokens_per_image()
    }

    /// Greedy report for one image.
    pub fn describe(&self, pixels: &[f64], opts: &EvalOptions) -> Result<(TokenSequence, crate::lm::Generation), EvalError> {
        let codes = self.tokenizer.tokenize_batch(pixels)?.remove(0);
        let p = self.prompting(Task::CxrToReport, opts)?;
        let cond = assemble_condition(self.vocab, Task::CxrToReport, &p, SequenceParts { image: Some(&codes), ..Default::default() })?;
        let g = generate(self.model, self.vocab, &cond, &DecodeConfig::greedy_text(opts.max_report_len), self.image_len(), &mut seed::rng(0))?;
        Ok((cond, g))
    }

    /// Image grid generated from a tokenised report.
    pub fn draw<R: Rng>(
        &self,
        report: &[String],
        mode: DecodeMode,
        opts: &EvalOptions,
        rng: &mut R,
    ) -> Result<(TokenSequence, Vec<usize>, Vec<f64>), EvalError> {
        let p = self.prompting(Task::ReportToCxr, opts)?;
        let cond = assemble_condition(self.vocab, Task::ReportToCxr, &p, SequenceParts { text: Some(report), ..Default::default() })?;
        let g = generate(self.model, self.vocab, &cond, &DecodeConfig::image(mode, opts.image_temperature), self.image_len(), rng)?;
        if g.truncated {
            return Err(EvalError::Metric("report too long to leave room for an image".into()));
        }
        let codes: Vec<usize> = g.generated.iter().filter_map(|&id| self.vocab.code_of(id)).collect();
        let pixels = self.tokenizer.detokenize(&codes)?.data().to_vec();
        Ok((cond, g.generated, pixels))
    }

    /// Greedy answer and the next-token distribution after the question.
    pub fn answer(
        &self,
        pixels: &[f64],
        question: &[String],
        opts: &EvalOptions,
    ) -> Result<(TokenSequence, crate::lm::Generation, Vec<f64>), EvalError> {
        let codes = self.tokenizer.tokenize_batch(pixels)?.remove(0);
        let p = self.prompting(Task::Vqa, opts)?;
        let parts = SequenceParts { image: Some(&codes), question: Some(question), ..Default::default() };
        let cond = assemble_condition(self.vocab, Task::Vqa, &p, parts)?;
        let probs = next_token_probs(self.model, &cond)?;
        let g = generate(self.model, self.vocab, &cond, &DecodeConfig::greedy_text(opts.max_answer_len), self.image_len(), &mut seed::rng(0))?;
        Ok((cond, g, probs))
    }

    fn words(&self, ids: &[usize]) -> Vec<String> {
        self.vocab.decode_words(ids)
    }
}

fn take(mut idx: Vec<usize>, limit: usize) -> Vec<usize> {
    if limit > 0 {
        idx.truncate(limit);
    }
    idx
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool")
}

/// Greedy report generation scored with BLEU-4, ROUGE-L, METEOR-lite, CIDEr
/// (document frequencies from the split's references) and finding F1.
pub fn eval_reports(sys: &System<'_>, corpus: &Corpus, split: Split, opts: &EvalOptions, workers: usize) -> Result<TaskOutcome, EvalError> {
    sys.check()?;
    let idx = take(corpus.split_indices(split), opts.limit);
    let decoded: Vec<(TokenSequence, crate::lm::Generation)> =
        pool(workers).install(|| idx.par_iter().map(|&i| sys.describe(&corpus.items[i].pixels, opts)).collect::<Result<_, _>>())?;
    let eos = sys.vocab.special(crate::lm::Special::Eos);
    let mut out = TaskOutcome { count: idx.len(), ..Default::default() };
    let (mut preds, mut refs, mut gold) = (Vec::new(), Vec::new(), Vec::new());
    let (mut b, mut r, mut m, mut exact) = (0.0, 0.0, 0.0, 0usize);
    for (&i, (cond, g)) in idx.iter().zip(decoded) {
        let item = &corpus.items[i];
        let body: Vec<usize> = g.generated.iter().copied().filter(|&id| id != eos).collect();
        let words = sys.words(&body);
        b += bleu(&words, std::slice::from_ref(&item.report), 4);
        r += rouge_l(&words, &item.report, 1.0);
        m += meteor_lite(&words, &item.report);
        exact += usize::from(words == item.report);
        out.transcripts.push(Transcript {
            id: item.id.clone(),
            task: Task::CxrToReport,
            condition: cond.ids,
            output_ids: g.generated,
            output_text: Some(detokenize(&words)),
            output_image_path: None,
            truncated: g.truncated,
            pixels: vec![],
        });
        preds.push(words);
        refs.push(vec![item.report.clone()]);
        gold.push(labels_of(&item.findings));
    }
    if idx.is_empty() {
        return Ok(out);
    }
    let n = idx.len() as f64;
    let corpus_refs: Vec<Vec<String>> = refs.iter().map(|r| r[0].clone()).collect();
    let prf = finding_f1(&preds, &gold).map_err(|e| EvalError::Metric(e.to_string()))?;
    let c = cider(&preds, &refs, &corpus_refs).map_err(|e| EvalError::Metric(e.to_string()))?;
    for (k, v) in [
        ("bleu", b / n),
        ("rouge_l", r / n),
        ("meteor", m / n),
        ("cider", c),
        ("finding_precision", prf.precision),
        ("finding_recall", prf.recall),
        ("finding_f1", prf.f1),
        ("exact_match", exact as f64 / n),
    ] {
        out.metrics.insert(k.into(), v);
    }
    Ok(out)
}

/// One sampled image per report, compared with the split's real films
/// through φ features. Uniform-noise films of the same count give a
/// reference distance.
pub fn eval_images(
    sys: &System<'_>,
    corpus: &Corpus,
    split: Split,
    opts: &EvalOptions,
    seed_value: u64,
    workers: usize,
) -> Result<TaskOutcome, EvalError> {
    sys.check()?;
    let idx = take(corpus.split_indices(split), opts.limit);
    let drawn: Vec<(TokenSequence, Vec<usize>, Vec<f64>)> = pool(workers).install(|| {
        idx.par_iter()
            .map(|&i| {
                let mut rng = seed::rng_for(seed_value, "eval-image", i as u64);
                sys.draw(&corpus.items[i].report, DecodeMode::Sample, opts, &mut rng)
            })
            .collect::<Result<_, _>>()
    })?;
    let mut out = TaskOutcome { count: idx.len(), ..Default::default() };
    if idx.len() < 2 {
        return Ok(out);
    }
    let hash = sys.phi.hash();
    let cloud = |images: &[f64], source| -> Result<FeatureCloud, EvalError> {
        let f = sys.phi.features(images)?;
        Ok(FeatureCloud { features: f.data().chunks(f.shape()[1]).map(<[f64]>::to_vec).collect(), source, phi_hash: hash.clone() })
    };
    let real: Vec<f64> = idx.iter().flat_map(|&i| corpus.items[i].pixels.iter().copied()).collect();
    let generated: Vec<f64> = drawn.iter().flat_map(|d| d.2.iter().copied()).collect();
    let mut rng = seed::rng_for(seed_value, "eval-noise", 0);
    let noise: Vec<f64> = (0..real.len()).map(|_| rng.gen::<f64>()).collect();
    let real = cloud(&real, CloudSource::Real)?;
    let fid = |c: &FeatureCloud| frechet_distance(c, &real).map_err(|e| EvalError::Metric(e.to_string()));
    out.metrics.insert("fid_proxy".into(), fid(&cloud(&generated, CloudSource::Generated)?)?);
    out.metrics.insert("fid_proxy_noise".into(), fid(&cloud(&noise, CloudSource::Generated)?)?);
    for (&i, (cond, ids, pixels)) in idx.iter().zip(drawn) {
        out.transcripts.push(Transcript {
            id: corpus.items[i].id.clone(),
            task: Task::ReportToCxr,
            condition: cond.ids,
            output_ids: ids,
            output_text: None,
            output_image_path: None,
            truncated: false,
            pixels,
        });
    }
    Ok(out)
}

/// Greedy answers scored by exact match. AUROC covers the yes/no presence
/// questions, scoring each by `P(yes) / (P(yes) + P(no))` at the first
/// answer position.
pub fn eval_vqa(sys: &System<'_>, corpus: &Corpus, split: Split, opts: &EvalOptions, workers: usize) -> Result<TaskOutcome, EvalError> {
    sys.check()?;
    let idx = take(corpus.vqa_indices(split), opts.limit);
    let yes = sys.vocab.word_id("yes").ok_or_else(|| EvalError::Metric("vocabulary lacks 'yes'".into()))?;
    let no = sys.vocab.word_id("no").ok_or_else(|| EvalError::Metric("vocabulary lacks 'no'".into()))?;
    let answered: Vec<(TokenSequence, crate::lm::Generation, Vec<f64>)> = pool(workers).install(|| {
        idx.par_iter()
            .map(|&q| {
                let v = &corpus.vqa[q];
                sys.answer(&corpus.items[v.item].pixels, &v.question, opts)
            })
            .collect::<Result<_, _>>()
    })?;
    let eos = sys.vocab.special(crate::lm::Special::Eos);
    let mut out = TaskOutcome { count: idx.len(), ..Default::default() };
    let (mut pred, mut gold, mut scored) = (BTreeMap::new(), BTreeMap::new(), Vec::new());
    for (&q, (cond, g, probs)) in idx.iter().zip(answered) {
        let v = &corpus.vqa[q];
        let body: Vec<usize> = g.generated.iter().copied().filter(|&id| id != eos).collect();
        let text = detokenize(&sys.words(&body));
        pred.insert(v.record.id.clone(), text.clone());
        gold.insert(v.record.id.clone(), v.record.answer.clone());
        if v.record.family == QuestionFamily::Presence {
            scored.push(ScoredBinary { score: probs[yes] / (probs[yes] + probs[no]), label: v.record.answer == "yes" });
        }
        out.transcripts.push(Transcript {
            id: v.record.id.clone(),
            task: Task::Vqa,
            condition: cond.ids,
            output_ids: g.generated,
            output_text: Some(text),
            output_image_path: None,
            truncated: g.truncated,
            pixels: vec![],
        });
    }
    if idx.is_empty() {
        return Ok(out);
    }
    out.metrics.insert("accuracy".into(), vqa_accuracy(&pred, &gold).map_err(|e| EvalError::Metric(e.to_string()))?);
    out.metrics.insert("presence_items".into(), scored.len() as f64);
    // AUROC is undefined when the presence questions are single-class.
    if let Ok(a) = auroc(&scored) {
        out.metrics.insert("auroc".into(), a);
    }
    Ok(out)
}

/// Which tasks [`evaluate`] runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSelection {
    pub report: bool,
    pub image: bool,
    pub vqa: bool,
}

impl TaskSelection {
    pub const ALL: Self = Self { report: true, image: true, vqa: true };
}

/// Runs the selected tasks and gathers them into one report (keys `report`,
/// `image`, `vqa`) plus the concatenated transcripts.
pub fn evaluate(
    sys: &System<'_>,
    corpus: &Corpus,
    split: Split,
    tasks: TaskSelection,
    opts: &EvalOptions,
    seed_value: u64,
    workers: usize,
) -> Result<(MetricsReport, Vec<Transcript>), EvalError> {
    let mut report = MetricsReport::new("", "", split.name());
    report.phi_hash = sys.phi.hash();
    report.seed = seed_value;
    let mut transcripts = Vec::new();
    let mut record = |name: &str, o: TaskOutcome| {
        for (k, v) in o.metrics {
            report.set(name, &k, v);
        }
        report.counts.insert(name.into(), o.count);
        transcripts.extend(o.transcripts);
    };
    if tasks.report {
        record("report", eval_reports(sys, corpus, split, opts, workers)?);
    }
    if tasks.image {
        record("image", eval_images(sys, corpus, split, opts, seed_value, workers)?);
    }
    if tasks.vqa {
        record("vqa", eval_vqa(sys, corpus, split, opts, workers)?);
    }
    Ok((report, transcripts))
}
