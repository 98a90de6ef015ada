use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{LmConfig, LmModel};
use super::sequence::TokenSequence;
use super::vocab::{Modality, Special, UnifiedVocab};
use super::LmError;
use crate::tensor::softmax_in_place;

/// Per-layer keys and values of the positions decoded so far.
#[derive(Clone, Debug)]
pub struct KvCache {
    pub(crate) keys: Vec<Vec<f64>>,
    pub(crate) values: Vec<Vec<f64>>,
    pub(crate) len: usize,
}

impl KvCache {
    pub fn new(cfg: &LmConfig) -> Self {
        let cap = cfg.context * cfg.d_model;
        Self {
            keys: (0..cfg.layers).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..cfg.layers).map(|_| Vec::with_capacity(cap)).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Ignored by greedy decoding.
    pub temperature: f64,
    /// Cap on generated text tokens (EOS included). Image decoding always
    /// emits a full grid.
    pub max_len: usize,
    pub target: Modality,
}

impl DecodeConfig {
    pub fn greedy_text(max_len: usize) -> Self {
        Self { mode: DecodeMode::Greedy, temperature: 1.0, max_len, target: Modality::Text }
    }

    pub fn image(mode: DecodeMode, temperature: f64) -> Self {
        Self { mode, temperature, max_len: 0, target: Modality::Image }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LmError::Contract(format!("temperature {} must be positive", self.temperature)));
        }
        if self.target == Modality::Special {
            return Err(LmError::Contract("decode target must be text or image".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Condition followed by the generated tokens.
    pub sequence: TokenSequence,
    pub generated: Vec<usize>,
    /// True when decoding stopped at a length limit instead of a terminator.
    pub truncated: bool,
}

/// Index of the largest allowed logit; the lowest index wins ties.
pub fn greedy_pick(logits: &[f64], allowed: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (i, (&l, &ok)) in logits.iter().zip(allowed).enumerate() {
        if ok && best.map_or(true, |b| l > logits[b]) {
            best = Some(i);
        }
    }
    best.expect("at least one allowed token")
}

fn sample_pick<R: Rng>(logits: &[f64], allowed: &[bool], temperature: f64, rng: &mut R) -> usize {
    let max = logits.iter().zip(allowed).filter(|(_, &ok)| ok).map(|(&l, _)| l).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .zip(allowed)
        .map(|(&l, &ok)| if ok { ((l - max) / temperature).exp() } else { 0.0 })
        .collect();
    let mut u = rng.gen::<f64>() * weights.iter().sum::<f64>();
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

fn prime(model: &LmModel, condition: &TokenSequence) -> Result<(KvCache, Vec<f64>), LmError> {
    if condition.is_empty() {
        return Err(LmError::Contract("empty condition".into()));
    }
    let mut cache = KvCache::new(&model.config);
    let mut logits = Vec::new();
    for &id in &condition.ids {
        logits = model.step(&mut cache, id)?;
    }
    Ok((cache, logits))
}

/// Next-token distribution after `condition`.
pub fn next_token_probs(model: &LmModel, condition: &TokenSequence) -> Result<Vec<f64>, LmError> {
    let (_, mut logits) = prime(model, condition)?;
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// Extends `condition` autoregressively.
///
/// Text decoding allows words and EOS and stops at EOS. Image decoding
/// starts an image span if the condition has not, allows only image ids for
/// `image_len` steps, then only IMG_END, and closes with EOS.
pub fn generate<R: Rng>(
    model: &LmModel,
    vocab: &UnifiedVocab,
    condition: &TokenSequence,
    cfg: &DecodeConfig,
    image_len: usize,
    rng: &mut R,
) -> Result<Generation, LmError> {
    cfg.validate()?;
    if vocab.len() != model.config.vocab_size {
        return Err(LmError::Contract(format!("vocabulary {} vs model {}", vocab.len(), model.config.vocab_size)));
    }
    let v = vocab.len();
    let context = model.config.context;
    let (mut cache, mut logits) = prime(model, condition)?;
    let mut seq = condition.clone();
    let mut generated = Vec::new();
    let push = |seq: &mut TokenSequence, generated: &mut Vec<usize>, id: usize| {
        seq.ids.push(id);
        seq.modality.push(vocab.modality(id).expect("vocab id"));
        seq.condition_mask.push(false);
        generated.push(id);
    };
    let pick = |logits: &[f64], allowed: &[bool], rng: &mut R| match cfg.mode {
        DecodeMode::Greedy => greedy_pick(logits, allowed),
        DecodeMode::Sample => sample_pick(logits, allowed, cfg.temperature, rng),
    };

    match cfg.target {
        Modality::Text => {
            let eos = vocab.special(Special::Eos);
            let allowed: Vec<bool> = (0..v).map(|i| i == eos || vocab.modality(i) == Some(Modality::Text)).collect();
            let budget = cfg.max_len.min(context.saturating_sub(seq.len()) + 1);
            for step in 0..budget {
                let id = pick(&logits, &allowed, rng);
                push(&mut seq, &mut generated, id);
                if id == eos {
                    return Ok(Generation { sequence: seq, generated, truncated: false });
                }
                if step + 1 < budget {
                    logits = model.step(&mut cache, id)?;
                }
            }
            Ok(Generation { sequence: seq, generated, truncated: true })
        }
        _ => {
            let (start, end) = (vocab.special(Special::ImgStart), vocab.special(Special::ImgEnd));
            let open = usize::from(seq.ids.last() != Some(&start));
            if seq.len() + open + image_len + 2 > context {
                return Ok(Generation { sequence: seq, generated, truncated: true });
            }
            if open == 1 {
                push(&mut seq, &mut generated, start);
                logits = model.step(&mut cache, start)?;
            }
            let image_allowed: Vec<bool> = (0..v).map(|i| vocab.modality(i) == Some(Modality::Image)).collect();
            for step in 0..image_len {
                let id = pick(&logits, &image_allowed, rng);
                push(&mut seq, &mut generated, id);
                if step + 1 < image_len {
                    logits = model.step(&mut cache, id)?;
                }
            }
            push(&mut seq, &mut generated, end);
            push(&mut seq, &mut generated, vocab.special(Special::Eos));
            Ok(Generation { sequence: seq, generated, truncated: false })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{template, tokenize, Task};
    use crate::lm::{assemble_condition, default_vocab, Prompting, SequenceParts};
    use crate::seed;

    fn setup() -> (LmModel, UnifiedVocab) {
        let v = default_vocab(16).unwrap();
        let cfg = LmConfig { vocab_size: v.len(), d_model: 16, heads: 2, layers: 1, ff: 32, context: 64 };
        (LmModel::init(cfg, 7).unwrap(), v)
    }

    #[test]
    fn greedy_is_deterministic_and_text_only() {
        let (m, v) = setup();
        let codes = [1; 16];
        let p = Prompting::Instructed(template(Task::CxrToReport, 0).unwrap());
        let cond = assemble_condition(&v, Task::CxrToReport, &p, SequenceParts { image: Some(&codes), ..Default::default() }).unwrap();
        let cfg = DecodeConfig::greedy_text(20);
        let a = generate(&m, &v, &cond, &cfg, 16, &mut seed::rng(1)).unwrap();
        let b = generate(&m, &v, &cond, &cfg, 16, &mut seed::rng(2)).unwrap();
        assert_eq!(a, b);
        let eos = v.special(Special::Eos);
        assert!(a.generated.iter().all(|&i| i == eos || v.modality(i) == Some(Modality::Text)));
        assert!(a.truncated || a.generated.last() == Some(&eos));
        assert!(a.generated.len() <= 20);
    }

    #[test]
    fn image_decoding_emits_exactly_one_grid() {
        let (m, v) = setup();
        let report = tokenize("no acute findings .");
        let p = Prompting::Instructed(template(Task::ReportToCxr, 0).unwrap());
        let cond = assemble_condition(&v, Task::ReportToCxr, &p, SequenceParts { text: Some(&report), ..Default::default() }).unwrap();
        for mode in [DecodeMode::Greedy, DecodeMode::Sample] {
            let g = generate(&m, &v, &cond, &DecodeConfig::image(mode, 1.0), 16, &mut seed::rng(3)).unwrap();
            assert_eq!(g.generated.len(), 19);
            assert_eq!(g.generated[0], v.special(Special::ImgStart));
            assert!(g.generated[1..17].iter().all(|&i| v.modality(i) == Some(Modality::Image)));
            assert_eq!(g.generated[17], v.special(Special::ImgEnd));
            g.sequence.validate(&v, 16).unwrap();
        }
    }

    #[test]
    fn greedy_invariant_to_logit_shift() {
        let logits = [0.3, -1.0, 2.5, 2.5, 0.0];
        let allowed = [true, true, true, true, false];
        let shifted: Vec<f64> = logits.iter().map(|l| l + 7.25).collect();
        assert_eq!(greedy_pick(&logits, &allowed), 2);
        assert_eq!(greedy_pick(&shifted, &allowed), 2);
        assert_eq!(greedy_pick(&logits, &[false, true, false, false, true]), 4);
    }

    #[test]
    fn sampling_respects_mask_and_temperature() {
        let logits = [0.0, 10.0, 0.0, 50.0];
        let allowed = [true, true, true, false];
        let mut rng = seed::rng(4);
        for _ in 0..100 {
            assert_ne!(sample_pick(&logits, &allowed, 1.0, &mut rng), 3);
        }
        let cold = (0..50).filter(|_| sample_pick(&logits, &allowed, 0.05, &mut rng) == 1).count();
        assert_eq!(cold, 50);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let (m, v) = setup();
        let codes = [2; 16];
        let q = tokenize("is there a nodule ?");
        let p = Prompting::Instructed(template(Task::Vqa, 0).unwrap());
        let cond = assemble_condition(&v, Task::Vqa, &p, SequenceParts { image: Some(&codes), question: Some(&q), ..Default::default() })
            .unwrap();
        let probs = next_token_probs(&m, &cond).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
