use super::model::LmModel;
use super::sequence::TokenSequence;
use super::LmError;
use crate::tensor::{softmax_in_place, ParamSet, Tape, Var};

/// Per-sequence coefficients: the loss is `Σ coeff_s · nll_s`.
#[derive(Clone, Debug)]
pub struct NllWeights(pub Vec<f64>);

impl NllWeights {
    pub fn mean(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }
}

/// `Σ_s coeff_s · nll_s` where `nll_s` is the mean next-token cross-entropy
/// over the scored positions of sequence `s`, evaluated in one packed pass.
pub fn batch_nll(
    model: &LmModel,
    tape: &mut Tape,
    vars: &[Var],
    seqs: &[&TokenSequence],
    coeffs: &NllWeights,
) -> Result<Var, LmError> {
    if seqs.is_empty() || seqs.len() != coeffs.0.len() {
        return Err(LmError::Contract(format!("{} sequences with {} coefficients", seqs.len(), coeffs.0.len())));
    }
    // Only rows that predict a scored token reach the output head.
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let mut offset = 0;
    for (s, &c) in seqs.iter().zip(&coeffs.0) {
        let scored = s.loss_positions();
        if scored.is_empty() {
            return Err(LmError::Contract("sequence has no scored positions".into()));
        }
        let w = c / scored.len() as f64;
        for &j in &scored {
            rows.push(offset + j - 1);
            targets.push(s.ids[j]);
            weights.push(w);
        }
        offset += s.len();
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(LmError::Contract("coefficients must have a positive sum".into()));
    }
    let ids: Vec<&[usize]> = seqs.iter().map(|s| s.ids.as_slice()).collect();
    let logits = model.forward_rows(tape, vars, &ids, rows)?;
    let ce = tape.cross_entropy(logits, &targets, &weights)?;
    Ok(tape.scale(ce, total))
}

/// Mean cross-entropy over the scored positions of one sequence.
pub fn sequence_nll(model: &LmModel, tape: &mut Tape, vars: &[Var], seq: &TokenSequence) -> Result<Var, LmError> {
    batch_nll(model, tape, vars, &[seq], &NllWeights(vec![1.0]))
}

/// Batch mean of `nll(image→text) + nll(text→image)` over paired layouts.
pub fn stage1_loss(
    model: &LmModel,
    tape: &mut Tape,
    vars: &[Var],
    pairs: &[(TokenSequence, TokenSequence)],
) -> Result<Var, LmError> {
    let seqs: Vec<&TokenSequence> = pairs.iter().flat_map(|(a, b)| [a, b]).collect();
    let c = 1.0 / pairs.len().max(1) as f64;
    batch_nll(model, tape, vars, &seqs, &NllWeights(vec![c; seqs.len()]))
}

/// Mean sequence nll over an instructed batch.
pub fn task_loss(model: &LmModel, tape: &mut Tape, vars: &[Var], batch: &[TokenSequence]) -> Result<Var, LmError> {
    let seqs: Vec<&TokenSequence> = batch.iter().collect();
    batch_nll(model, tape, vars, &seqs, &NllWeights::mean(seqs.len()))
}

fn check_matched(params: &ParamSet, anchor: &ParamSet) -> Result<(), LmError> {
    if params.names() != anchor.names() {
        return Err(LmError::Contract("parameter names differ from the anchor".into()));
    }
    for ((name, a), b) in params.iter().zip(anchor.tensors()) {
        if a.shape() != b.shape() {
            return Err(LmError::Contract(format!("{name}: shape {:?} vs anchor {:?}", a.shape(), b.shape())));
        }
    }
    Ok(())
}

/// `Σ ‖θ − θ_anchor‖²` over all parameters, on the tape.
pub fn reg_loss(tape: &mut Tape, vars: &[Var], params: &ParamSet, anchor: &ParamSet) -> Result<Var, LmError> {
    check_matched(params, anchor)?;
    let mut acc: Option<Var> = None;
    for (&v, a) in vars.iter().zip(anchor.tensors()) {
        let a = tape.leaf(a.clone());
        let d = tape.sub(v, a)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| LmError::Contract("no parameters".into()))
}

pub fn reg_value(params: &ParamSet, anchor: &ParamSet) -> Result<f64, LmError> {
    check_matched(params, anchor)?;
    Ok(params
        .tensors()
        .iter()
        .zip(anchor.tensors())
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
        .sum())
}

/// `max |θ − θ_anchor|` over every coordinate.
pub fn max_drift(params: &ParamSet, anchor: &ParamSet) -> Result<f64, LmError> {
    check_matched(params, anchor)?;
    Ok(params
        .tensors()
        .iter()
        .zip(anchor.tensors())
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max))
}

/// `L_task + L_recon + λ_reg·L_reg`.
pub fn total_loss(task: f64, recon: f64, reg: f64, lambda_reg: f64) -> f64 {
    task + recon + lambda_reg * reg
}

/// Cross-entropy at each scored position of `seq`, value only.
pub fn position_nlls(model: &LmModel, seq: &TokenSequence) -> Result<Vec<f64>, LmError> {
    let logits = model.logits(&seq.ids)?;
    let v = model.config.vocab_size;
    Ok(seq
        .loss_positions()
        .into_iter()
        .map(|j| {
            let mut row = logits.data()[(j - 1) * v..j * v].to_vec();
            softmax_in_place(&mut row);
            -row[seq.ids[j]].ln()
        })
        .collect())
}
