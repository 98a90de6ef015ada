//! Report-level text metrics over pre-tokenised sequences.

use std::collections::HashMap;

type Gram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Gram<'_>, usize> {
    let mut out = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU with up to `max_n`-gram precisions and the standard
/// brevity penalty (closest reference length, shorter on ties).
///
/// Smoothing: an order `n ≥ 2` with no clipped matches uses
/// `1 / (candidate n-grams + 1)` in place of zero. Unigram precision is never
/// smoothed, so a candidate sharing no word with any reference scores 0.
/// Returns `(score, empty_candidate)`; an empty candidate scores 0.
pub fn bleu_with_flag(candidate: &[String], references: &[Vec<String>], max_n: usize) -> (f64, bool) {
    if candidate.is_empty() {
        return (0.0, true);
    }
    if references.is_empty() || max_n == 0 {
        return (0.0, false);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        let ref_counts: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| {
                let max_ref = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                c.min(max_ref)
            })
            .sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return (0.0, false);
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty references");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    (bp * (log_sum / max_n as f64).exp(), false)
}

pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> f64 {
    bleu_with_flag(candidate, references, max_n).0
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure; 0 when either side is empty or nothing matches.
pub fn rouge_l(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Exact-match unigram alignment: the k-th occurrence of a word in the
/// candidate aligns with its k-th occurrence in the reference, when present.
/// Returns `(candidate position, reference position)` pairs in candidate
/// order.
pub fn align_exact(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut out = Vec::new();
    for (i, w) in candidate.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && &reference[j] == w) {
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Simplified METEOR: `F_mean = 10PR / (R + 9P)`, fragmentation penalty
/// `0.5 (chunks / matches)^3`.
pub fn meteor_lite(candidate: &[String], reference: &[String]) -> f64 {
    let align = align_exact(candidate, reference);
    let m = align.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + align.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CiderError {
    #[error("CIDEr needs a non-empty document corpus")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} reference sets")]
    Mismatch { candidates: usize, references: usize },
}

/// Document frequencies of every n-gram (n = 1..=4) over `corpus`.
pub struct CiderIdf<'a> {
    df: HashMap<Gram<'a>, usize>,
    docs: usize,
}

impl<'a> CiderIdf<'a> {
    pub fn new(corpus: &'a [Vec<String>]) -> Result<Self, CiderError> {
        if corpus.is_empty() {
            return Err(CiderError::EmptyCorpus);
        }
        let mut df = HashMap::new();
        for doc in corpus {
            for n in 1..=4 {
                for g in ngram_counts(doc, n).into_keys() {
                    *df.entry(g).or_insert(0) += 1;
                }
            }
        }
        Ok(Self { df, docs: corpus.len() })
    }

    fn idf(&self, g: Gram<'_>) -> f64 {
        let df = self.df.get(g).copied().unwrap_or(0).max(1);
        (self.docs as f64 / df as f64).ln()
    }

    fn vector<'t>(&self, tokens: &'t [String], n: usize) -> HashMap<Gram<'t>, f64> {
        ngram_counts(tokens, n).into_iter().map(|(g, c)| (g, c as f64 * self.idf(g))).collect()
    }

    /// Score of one candidate against its references, in `[0, 10]`.
    ///
    /// Each order contributes the mean cosine over references; orders where
    /// neither side has any n-gram are left out of the average.
    pub fn score(&self, candidate: &[String], references: &[Vec<String>]) -> f64 {
        let mut orders = Vec::new();
        for n in 1..=4 {
            let cv = self.vector(candidate, n);
            let mut sims = Vec::new();
            for r in references {
                let rv = self.vector(r, n);
                if cv.is_empty() && rv.is_empty() {
                    continue;
                }
                sims.push(cosine(&cv, &rv));
            }
            if !sims.is_empty() {
                orders.push(sims.iter().sum::<f64>() / sims.len() as f64);
            }
        }
        if orders.is_empty() {
            return 0.0;
        }
        10.0 * orders.iter().sum::<f64>() / orders.len() as f64
    }
}

fn cosine(a: &HashMap<Gram<'_>, f64>, b: &HashMap<Gram<'_>, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean CIDEr over candidates, with document frequencies from `corpus`.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], corpus: &[Vec<String>]) -> Result<f64, CiderError> {
    if candidates.len() != references.len() {
        return Err(CiderError::Mismatch { candidates: candidates.len(), references: references.len() });
    }
    let idf = CiderIdf::new(corpus)?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = candidates.iter().zip(references).map(|(c, r)| idf.score(c, r)).sum();
    Ok(total / candidates.len() as f64)
}
