use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{reg_loss, stage1_loss, task_loss};
use super::model::LmModel;
use super::sequence::{assemble_sequence, Prompting, SequenceParts, TokenSequence};
use super::vocab::UnifiedVocab;
use super::LmError;
use crate::corpus::{templates, Corpus, Split, Task};
use crate::seed;
use crate::tensor::{adam_step, AdamConfig, AdamState, ParamSet, Tape};
use crate::tokenizer::{TokenizerError, VqTokenizer};

/// Image token grids for every corpus item, in corpus order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedCorpus {
    pub codes: Vec<Vec<usize>>,
}

impl TokenizedCorpus {
    pub fn new(tokenizer: &VqTokenizer, corpus: &Corpus) -> Result<Self, TokenizerError> {
        let mut codes = Vec::with_capacity(corpus.items.len());
        for chunk in corpus.items.chunks(64) {
            let pixels: Vec<f64> = chunk.iter().flat_map(|it| it.pixels.iter().copied()).collect();
            codes.extend(tokenizer.tokenize_batch(&pixels)?);
        }
        Ok(Self { codes })
    }
}

/// Relative task frequencies within a stage-2 batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TaskMix {
    pub cxr_to_report: f64,
    pub report_to_cxr: f64,
    pub vqa: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self { cxr_to_report: 2.0, report_to_cxr: 1.0, vqa: 1.0 }
    }
}

impl TaskMix {
    pub fn weight(&self, task: Task) -> f64 {
        match task {
            Task::CxrToReport => self.cxr_to_report,
            Task::ReportToCxr => self.report_to_cxr,
            Task::Vqa => self.vqa,
        }
    }

    /// Items per task for a batch of `batch`, by largest remainder.
    pub fn counts(&self, batch: usize) -> Result<[usize; 3], LmError> {
        let w: Vec<f64> = Task::ALL.iter().map(|&t| self.weight(t)).collect();
        let total: f64 = w.iter().sum();
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || !(total > 0.0) {
            return Err(LmError::Contract(format!("invalid task mix {self:?}")));
        }
        let exact: Vec<f64> = w.iter().map(|x| x / total * batch as f64).collect();
        let mut counts = [0usize; 3];
        for (c, e) in counts.iter_mut().zip(&exact) {
            *c = e.floor() as usize;
        }
        let mut rest: Vec<usize> = (0..3).collect();
        rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let missing = batch - counts.iter().sum::<usize>();
        for &i in rest.iter().take(missing) {
            counts[i] += 1;
        }
        Ok(counts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: usize,
    /// Sequences per step; stage 1 spends two per pair.
    pub batch: usize,
    pub lr: f64,
    pub lambda_reg: f64,
    pub task_mix: TaskMix,
    /// False replaces task markers and instruction words with PAD.
    pub instructions: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 16, lr: 1e-3, lambda_reg: 1.0, task_mix: TaskMix::default(), instructions: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCurveRow {
    pub step: usize,
    pub task: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct StageRun {
    pub model: LmModel,
    pub curve: Vec<StageCurveRow>,
}

/// Paired pretraining layouts (image→report, report→image) without prompts.
pub fn stage1_pairs(
    vocab: &UnifiedVocab,
    corpus: &Corpus,
    codes: &TokenizedCorpus,
    item: usize,
    context: usize,
) -> Result<(TokenSequence, TokenSequence), LmError> {
    let parts = SequenceParts { image: Some(&codes.codes[item]), text: Some(&corpus.items[item].report), question: None };
    Ok((
        assemble_sequence(vocab, Task::CxrToReport, &Prompting::Bare, parts, context)?,
        assemble_sequence(vocab, Task::ReportToCxr, &Prompting::Bare, parts, context)?,
    ))
}

/// Cycles through a shuffled index list, reshuffling at each epoch.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(items: Vec<usize>) -> Self {
        let cursor = items.len();
        Self { order: items, cursor }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

fn check_inputs(model: &LmModel, vocab: &UnifiedVocab, corpus: &Corpus, codes: &TokenizedCorpus, cfg: &TrainingConfig) -> Result<(), LmError> {
    if vocab.len() != model.config.vocab_size {
        return Err(LmError::Contract(format!("vocabulary {} vs model {}", vocab.len(), model.config.vocab_size)));
    }
    if codes.codes.len() != corpus.items.len() {
        return Err(LmError::Contract("token grids do not match the corpus".into()));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !(cfg.lambda_reg >= 0.0 && cfg.lambda_reg.is_finite()) {
        return Err(LmError::Contract(format!("invalid training config {cfg:?}")));
    }
    if corpus.split_indices(Split::Train).is_empty() {
        return Err(LmError::Contract("no training items".into()));
    }
    Ok(())
}

/// One Adam step on `objective`; returns an error carrying the pre-step
/// model when anything turns non-finite.
fn apply(
    model: &mut LmModel,
    tape: &mut Tape,
    vars: &[crate::tensor::Var],
    objective: crate::tensor::Var,
    adam: &mut AdamState,
    opt: &AdamConfig,
    step: usize,
) -> Result<(), LmError> {
    let value = tape.value(objective).item();
    let fail = |detail: String, m: &LmModel| LmError::NonFinite { step, detail, last_good: Some(Box::new(m.clone())) };
    if !value.is_finite() {
        return Err(fail(format!("objective {value}"), model));
    }
    tape.backward(objective).map_err(|e| fail(e.to_string(), model))?;
    let grads = ParamSet::collect_grads(tape, vars);
    let snapshot = model.clone();
    adam_step(model.params.tensors_mut(), &grads, adam, opt)?;
    if !model.params.all_finite() {
        return Err(fail("non-finite parameters after update".into(), &snapshot));
    }
    Ok(())
}

/// Stage 1: paired image→report and report→image modelling on the
/// training split.
pub fn train_stage1(
    init: LmModel,
    vocab: &UnifiedVocab,
    corpus: &Corpus,
    codes: &TokenizedCorpus,
    cfg: &TrainingConfig,
    seed_value: u64,
) -> Result<StageRun, LmError> {
    check_inputs(&init, vocab, corpus, codes, cfg)?;
    let mut model = init;
    let context = model.config.context;
    let train = corpus.split_indices(Split::Train);
    let pairs: Vec<(TokenSequence, TokenSequence)> =
        train.iter().map(|&i| stage1_pairs(vocab, corpus, codes, i, context)).collect::<Result<_, _>>()?;
    let mut rng = seed::rng_for(seed_value, "stage1-batches", 0);
    let mut sampler = Sampler::new((0..pairs.len()).collect());
    let opt = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut adam = AdamState::new(model.params.tensors());
    let mut curve = Vec::with_capacity(cfg.steps);
    let per_step = (cfg.batch / 2).max(1);
    for step in 0..cfg.steps {
        let batch: Vec<(TokenSequence, TokenSequence)> = (0..per_step).map(|_| pairs[sampler.next(&mut rng)].clone()).collect();
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, true);
        let loss = stage1_loss(&model, &mut tape, &vars, &batch)?;
        let v = tape.value(loss).item();
        curve.push(StageCurveRow { step, task: v, reg: 0.0, total: v });
        apply(&mut model, &mut tape, &vars, loss, &mut adam, &opt, step)?;
    }
    Ok(StageRun { model, curve })
}

/// One stage-2 training item.
fn instructed(
    vocab: &UnifiedVocab,
    corpus: &Corpus,
    codes: &TokenizedCorpus,
    task: Task,
    index: usize,
    instructions: bool,
    context: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSequence, LmError> {
    let options = templates(task);
    let t = options[rng.gen_range(0..options.len())].clone();
    let prompting = if instructions { Prompting::Instructed(t) } else { Prompting::Padded(t) };
    match task {
        Task::Vqa => {
            let q = &corpus.vqa[index];
            let parts = SequenceParts { image: Some(&codes.codes[q.item]), text: Some(&q.answer), question: Some(&q.question) };
            assemble_sequence(vocab, task, &prompting, parts, context)
        }
        _ => {
            let parts = SequenceParts { image: Some(&codes.codes[index]), text: Some(&corpus.items[index].report), question: None };
            assemble_sequence(vocab, task, &prompting, parts, context)
        }
    }
}

/// Stage 2: instruction-formatted tasks mixed per batch by `task_mix`, with
/// `λ_reg·Σ‖θ − θ_anchor‖²` added to the objective. `recon` is the frozen
/// tokenizer's reconstruction loss, reported in `total` only.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    init: LmModel,
    anchor: &ParamSet,
    vocab: &UnifiedVocab,
    corpus: &Corpus,
    codes: &TokenizedCorpus,
    cfg: &TrainingConfig,
    recon: f64,
    seed_value: u64,
) -> Result<StageRun, LmError> {
    check_inputs(&init, vocab, corpus, codes, cfg)?;
    let mut model = init;
    let context = model.config.context;
    let counts = cfg.task_mix.counts(cfg.batch)?;
    let train = corpus.split_indices(Split::Train);
    let train_vqa = corpus.vqa_indices(Split::Train);
    if counts[2] > 0 && train_vqa.is_empty() {
        return Err(LmError::Contract("task mix asks for VQA but the training split has none".into()));
    }
    let mut samplers = [Sampler::new(train.clone()), Sampler::new(train), Sampler::new(train_vqa)];
    let mut rng = seed::rng_for(seed_value, "stage2-batches", 0);
    let opt = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut adam = AdamState::new(model.params.tensors());
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for (k, &task) in Task::ALL.iter().enumerate() {
            for _ in 0..counts[k] {
                let i = samplers[k].next(&mut rng);
                batch.push(instructed(vocab, corpus, codes, task, i, cfg.instructions, context, &mut rng)?);
            }
        }
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, true);
        let task = task_loss(&model, &mut tape, &vars, &batch)?;
        let reg = reg_loss(&mut tape, &vars, &model.params, anchor)?;
        let weighted = tape.scale(reg, cfg.lambda_reg);
        let objective = tape.add(task, weighted)?;
        let (t, r) = (tape.value(task).item(), tape.value(reg).item());
        curve.push(StageCurveRow { step, task: t, reg: r, total: super::total_loss(t, recon, r, cfg.lambda_reg) });
        apply(&mut model, &mut tape, &vars, objective, &mut adam, &opt, step)?;
    }
    Ok(StageRun { model, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mix_splits_sixteen_as_eight_four_four() {
        assert_eq!(TaskMix::default().counts(16).unwrap(), [8, 4, 4]);
        assert_eq!(TaskMix::default().counts(5).unwrap().iter().sum::<usize>(), 5);
        let only_vqa = TaskMix { cxr_to_report: 0.0, report_to_cxr: 0.0, vqa: 1.0 };
        assert_eq!(only_vqa.counts(4).unwrap(), [0, 0, 4]);
        assert!(TaskMix { cxr_to_report: 0.0, report_to_cxr: 0.0, vqa: 0.0 }.counts(4).is_err());
    }
}
