use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::findings::{kind_sides, LabelSet};
use crate::corpus::grammar::{extract_from_tokens, tokenize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClassifyError {
    #[error("AUROC is undefined without both classes ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("non-finite score at item {0}")]
    NonFinite(usize),
    #[error("no prediction for item {0}")]
    Missing(String),
    #[error("{0} predictions but {1} gold items")]
    Mismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBinary {
    pub score: f64,
    pub label: bool,
}

/// Mann-Whitney AUROC with ties counted one half.
pub fn auroc(items: &[ScoredBinary]) -> Result<f64, ClassifyError> {
    if let Some(i) = items.iter().position(|it| !it.score.is_finite()) {
        return Err(ClassifyError::NonFinite(i));
    }
    let pos = items.iter().filter(|it| it.label).count();
    let neg = items.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(ClassifyError::SingleClass { positives: pos, negatives: neg });
    }
    let mut sorted: Vec<&ScoredBinary> = items.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // Sum of average (1-based) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].score == sorted[i].score {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * sorted[i..=j].iter().filter(|it| it.label).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged precision, recall and F1 of `(kind, side)` labels
/// extracted from predicted reports. Precision (recall) is 1 when nothing is
/// predicted (nothing is gold).
pub fn finding_f1(predicted: &[Vec<String>], gold: &[LabelSet]) -> Result<Prf, ClassifyError> {
    if predicted.len() != gold.len() {
        return Err(ClassifyError::Mismatch(predicted.len(), gold.len()));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        let pred: BTreeSet<_> = kind_sides(&extract_from_tokens(p));
        let want = kind_sides(g);
        tp += pred.intersection(&want).count();
        fp += pred.difference(&want).count();
        fneg += want.difference(&pred).count();
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 1.0 } else { tp as f64 / (tp + fneg) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(Prf { precision, recall, f1 })
}

/// Exact-match accuracy after lowercasing and punctuation splitting.
pub fn vqa_accuracy(predicted: &BTreeMap<String, String>, gold: &BTreeMap<String, String>) -> Result<f64, ClassifyError> {
    if gold.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (id, answer) in gold {
        let Some(p) = predicted.get(id) else {
            return Err(ClassifyError::Missing(id.clone()));
        };
        if tokenize(p) == tokenize(answer) {
            hits += 1;
        }
    }
    Ok(hits as f64 / gold.len() as f64)
}
