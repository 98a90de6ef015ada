//! Brute-force metric oracles, the frozen fixture and the checks that
//! compare the metric implementations against them. Checks panic on failure.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use radvl_core::corpus::{tokenize, FindingKind, FindingLabel, LabelSet, Side};
pub use radvl_core::eval::{
    auroc, bleu, cider, finding_f1, frechet_distance, meteor_lite, rouge_l, CloudSource, FeatureCloud, ScoredBinary,
};

pub const TOL: f64 = 1e-9;

/// (candidate, reference) report pairs. Frozen: the expected values below
/// are derived from these strings by the oracles.
pub const PAIRS: [(&str, &str); 10] = [
    ("no acute findings .", "no acute cardiopulmonary findings ."),
    ("the lungs are clear .", "the lungs are clear ."),
    ("there is a small nodule in the left lung .", "a small left pulmonary nodule is noted ."),
    ("mild cardiomegaly .", "the heart is mildly enlarged ."),
    (
        "moderate right pleural effusion . the heart is severely enlarged .",
        "there is a moderate pleural effusion on the right side . severe cardiomegaly .",
    ),
    ("normal chest radiograph .", "no acute cardiopulmonary abnormality ."),
    ("the left lung shows severe airspace opacity .", "there is severe airspace opacity in the left lung ."),
    ("lung lung lung the the .", "the lung is clear ."),
    ("clear are lungs the .", "the lungs are clear ."),
    (
        "large bilateral pleural effusion .",
        "large pleural fluid at both bases . there is a large nodule in the right lung .",
    ),
];

pub fn toks(s: &str) -> Vec<String> {
    tokenize(s)
}

pub fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

pub fn occurrences(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

// ------------------------------------------------------------------ oracles

pub fn bleu_oracle(c: &[String], refs: &[Vec<String>]) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=4 {
        let cg = grams(c, n);
        let distinct: BTreeSet<Vec<String>> = cg.iter().cloned().collect();
        let mut clipped = 0;
        for g in &distinct {
            let in_refs = refs.iter().map(|r| occurrences(&grams(r, n), g)).max().unwrap();
            clipped += occurrences(&cg, g).min(in_refs);
        }
        let p = match (clipped, n) {
            (0, 1) => return 0.0,
            (0, _) => 1.0 / (cg.len() as f64 + 1.0),
            _ => clipped as f64 / cg.len() as f64,
        };
        log_p += p.ln() / 4.0;
    }
    let mut best = refs[0].len();
    for r in refs {
        let (d, bd) = (r.len().abs_diff(c.len()), best.abs_diff(c.len()));
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    let bp = if c.len() > best { 1.0 } else { (1.0 - best as f64 / c.len() as f64).exp() };
    bp * log_p.exp()
}

pub fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|w| it.any(|x| x == *w))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 18);
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if is_subsequence(&sub, b) {
            best = k;
        }
    }
    best
}

pub fn rouge_oracle(c: &[String], r: &[String]) -> f64 {
    let l = lcs_oracle(c, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rc) = (l / c.len() as f64, l / r.len() as f64);
    2.0 * p * rc / (p + rc)
}

/// The k-th occurrence of a word in the candidate matches its k-th
/// occurrence in the reference.
pub fn meteor_oracle(c: &[String], r: &[String]) -> f64 {
    let mut pairs = Vec::new();
    for (i, w) in c.iter().enumerate() {
        let k = c[..i].iter().filter(|x| *x == w).count();
        if let Some((j, _)) = r.iter().enumerate().filter(|(_, x)| *x == w).nth(k) {
            pairs.push((i, j));
        }
    }
    let m = pairs.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let mut chunks = 1.0;
    for w in pairs.windows(2) {
        if w[1] != (w[0].0 + 1, w[0].1 + 1) {
            chunks += 1.0;
        }
    }
    let (p, rc) = (m / c.len() as f64, m / r.len() as f64);
    let f = 10.0 * p * rc / (rc + 9.0 * p);
    f * (1.0 - 0.5 * (chunks / m).powi(3))
}

pub fn tfidf(t: &[String], n: usize, corpus: &[Vec<String>]) -> BTreeMap<Vec<String>, f64> {
    let mut v = BTreeMap::new();
    let g = grams(t, n);
    for x in &g {
        let df = corpus.iter().filter(|d| grams(d, n).contains(x)).count().max(1);
        let idf = (corpus.len() as f64 / df as f64).ln();
        v.insert(x.clone(), occurrences(&g, x) as f64 * idf);
    }
    v
}

pub fn cos(a: &BTreeMap<Vec<String>, f64>, b: &BTreeMap<Vec<String>, f64>) -> f64 {
    let dot: f64 = a.iter().map(|(k, x)| x * b.get(k).unwrap_or(&0.0)).sum();
    let na: f64 = a.values().map(|x| x * x).sum();
    let nb: f64 = b.values().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb).sqrt()
    }
}

pub fn cider_oracle(c: &[String], refs: &[Vec<String>], corpus: &[Vec<String>]) -> f64 {
    let mut per_order = Vec::new();
    for n in 1..=4 {
        let cv = tfidf(c, n, corpus);
        let sims: Vec<f64> = refs
            .iter()
            .map(|r| tfidf(r, n, corpus))
            .filter(|rv| !(cv.is_empty() && rv.is_empty()))
            .map(|rv| cos(&cv, &rv))
            .collect();
        if !sims.is_empty() {
            per_order.push(sims.iter().sum::<f64>() / sims.len() as f64);
        }
    }
    10.0 * per_order.iter().sum::<f64>() / per_order.len() as f64
}

pub fn auroc_oracle(items: &[(f64, bool)]) -> f64 {
    let mut wins = 0.0;
    let mut total = 0.0;
    for &(sp, _) in items.iter().filter(|x| x.1) {
        for &(sn, _) in items.iter().filter(|x| !x.1) {
            total += 1.0;
            wins += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / total
}

// ------------------------------------------------------------------ fixture

pub fn text_metrics_match_oracles_on_fixture() {
    let corpus: Vec<Vec<String>> = PAIRS.iter().map(|p| toks(p.1)).collect();
    for (i, (c, r)) in PAIRS.iter().enumerate() {
        let (c, r) = (toks(c), toks(r));
        let refs = vec![r.clone()];
        let pairs = [
            ("bleu", bleu(&c, &refs, 4), bleu_oracle(&c, &refs)),
            ("rouge_l", rouge_l(&c, &r, 1.0), rouge_oracle(&c, &r)),
            ("meteor", meteor_lite(&c, &r), meteor_oracle(&c, &r)),
            (
                "cider",
                cider(&[c.clone()], &[refs.clone()], &corpus).unwrap(),
                cider_oracle(&c, &refs, &corpus),
            ),
        ];
        for (name, got, want) in pairs {
            assert!((got - want).abs() < TOL, "{name} item {i}: {got} vs oracle {want}");
        }
    }
}

pub fn hand_values() {
    let rl = rouge_l(&toks("no acute disease"), &toks("no acute cardiopulmonary disease"), 1.0);
    assert!((rl - 6.0 / 7.0).abs() < TOL);
    assert!((meteor_lite(&toks("b a"), &toks("a b")) - 0.5).abs() < TOL);
    let s = toks("the lungs are clear .");
    assert!((meteor_lite(&s, &s) - (1.0 - 0.5 / 125.0)).abs() < TOL);
    assert_eq!(bleu(&s, &[s.clone()], 4), 1.0);
    let b = bleu(&toks("no acute findings"), &[toks("no acute cardiopulmonary findings")], 4);
    assert!((b - bleu_oracle(&toks("no acute findings"), &[toks("no acute cardiopulmonary findings")])).abs() < TOL);
}

/// Holds when every candidate n-gram occurs in the corpus: document counts
/// and frequencies then scale together and the IDF weights are unchanged.
pub fn cider_unchanged_by_duplicating_the_corpus() {
    let docs: Vec<Vec<String>> =
        ["no acute findings .", "no acute cardiopulmonary abnormality .", "the lungs are clear ."]
            .iter()
            .map(|s| toks(s))
            .collect();
    let twice: Vec<Vec<String>> = docs.iter().chain(docs.iter()).cloned().collect();
    let c = docs[0].clone();
    let refs = vec![docs[1].clone()];
    let a = cider(&[c.clone()], &[refs.clone()], &docs).unwrap();
    let b = cider(&[c.clone()], &[refs.clone()], &twice).unwrap();
    assert!(a > 0.0);
    assert!((a - b).abs() < TOL);
    assert!((a - cider_oracle(&c, &refs, &docs)).abs() < TOL);
}

pub const SCORES: [(f64, bool); 10] = [
    (0.91, true),
    (0.40, true),
    (0.62, false),
    (0.40, false),
    (0.77, true),
    (0.05, false),
    (0.62, true),
    (0.33, false),
    (0.88, false),
    (0.50, true),
];

pub fn auroc_matches_pair_counting() {
    let items: Vec<ScoredBinary> = SCORES.iter().map(|&(score, label)| ScoredBinary { score, label }).collect();
    assert!((auroc(&items).unwrap() - auroc_oracle(&SCORES)).abs() < TOL);
    let four = [(0.9, true), (0.4, true), (0.6, false), (0.2, false)];
    let items: Vec<ScoredBinary> = four.iter().map(|&(score, label)| ScoredBinary { score, label }).collect();
    assert!((auroc(&items).unwrap() - 0.75).abs() < TOL);
}

use FindingKind::*;
use Side::*;

/// Predicted report, the (kind, side) pairs a reader finds in it, and the
/// gold pairs.
pub type F1Item = (&'static str, &'static [(FindingKind, Side)], &'static [(FindingKind, Side)]);

pub const F1_FIXTURE: [F1Item; 10] = [
    ("there is a small nodule in the left lung .", &[(Nodule, Left)], &[(Nodule, Left), (Effusion, Right)]),
    ("no acute findings .", &[], &[]),
    ("the heart is mildly enlarged .", &[(Cardiomegaly, NotApplicable)], &[(Cardiomegaly, NotApplicable)]),
    ("moderate right pleural effusion .", &[(Effusion, Right)], &[(Effusion, Left)]),
    ("the lungs are clear .", &[], &[(Opacity, Right)]),
    (
        "large bilateral pleural effusion . severe cardiomegaly .",
        &[(Effusion, Bilateral), (Cardiomegaly, NotApplicable)],
        &[(Effusion, Bilateral)],
    ),
    ("mild left consolidation is seen .", &[(Opacity, Left)], &[(Opacity, Left)]),
    (
        "a small right pulmonary nodule is noted . the left lung shows mild airspace opacity .",
        &[(Nodule, Right), (Opacity, Left)],
        &[(Nodule, Right), (Opacity, Left), (Cardiomegaly, NotApplicable)],
    ),
    ("normal chest radiograph .", &[], &[(Nodule, Left)]),
    ("severe pleural fluid at the left base .", &[(Effusion, Left)], &[(Effusion, Left)]),
];

pub fn label_set(pairs: &[(FindingKind, Side)]) -> LabelSet {
    pairs.iter().map(|&(kind, side)| FindingLabel { kind, side, severity: None }).collect()
}

pub fn finding_f1_matches_set_arithmetic() {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (_, pred, gold) in F1_FIXTURE {
        let (p, g): (BTreeSet<_>, BTreeSet<_>) = (pred.iter().collect(), gold.iter().collect());
        tp += p.intersection(&g).count() as f64;
        fp += p.difference(&g).count() as f64;
        fneg += g.difference(&p).count() as f64;
    }
    let (p, r) = (tp / (tp + fp), tp / (tp + fneg));
    let f1 = 2.0 * p * r / (p + r);
    let predicted: Vec<Vec<String>> = F1_FIXTURE.iter().map(|x| toks(x.0)).collect();
    let gold: Vec<LabelSet> = F1_FIXTURE.iter().map(|x| label_set(x.2)).collect();
    let got = finding_f1(&predicted, &gold).unwrap();
    assert!((got.precision - p).abs() < TOL && (got.recall - r).abs() < TOL && (got.f1 - f1).abs() < TOL, "{got:?}");

    let one = finding_f1(&[toks("there is a small nodule in the left lung .")], &[label_set(&[(Nodule, Left), (Effusion, Left)])])
        .unwrap();
    assert!((one.f1 - 2.0 / 3.0).abs() < TOL && one.precision == 1.0 && one.recall == 0.5);
}

// --------------------------------------------------------------- Fréchet

pub fn cloud(points: Vec<Vec<f64>>) -> FeatureCloud {
    FeatureCloud { features: points, source: CloudSource::Real, phi_hash: "h".into() }
}

pub fn frechet_one_dimensional_closed_form() {
    let a = std::f64::consts::FRAC_1_SQRT_2;
    let x = cloud(vec![vec![-a], vec![a]]);
    let y = cloud(vec![vec![1.0 - a], vec![1.0 + a]]);
    assert!((frechet_distance(&x, &y).unwrap() - 1.0).abs() < 1e-6);
}

/// Points of a two-level factorial design: the sample covariance is exactly
/// diagonal, so the distance separates per coordinate.
pub fn factorial(mean: &[f64], spread: &[f64]) -> Vec<Vec<f64>> {
    let d = mean.len();
    (0..1usize << d)
        .map(|m| (0..d).map(|j| mean[j] + if m >> j & 1 == 1 { spread[j] } else { -spread[j] }).collect())
        .collect()
}

pub fn frechet_diagonal_closed_form() {
    let (ma, sa): ([f64; 4], [f64; 4]) = ([0.0, 1.0, -2.0, 0.5], [1.0, 0.3, 2.0, 0.7]);
    let (mb, sb): ([f64; 4], [f64; 4]) = ([0.5, 1.0, -1.0, 0.0], [0.4, 0.3, 1.0, 1.5]);
    let n = 16.0;
    let mut want = 0.0;
    for j in 0..4 {
        // Sample variance with n−1 denominator, plus shrinkage.
        let va = sa[j] * sa[j] * n / (n - 1.0) + 1e-6;
        let vb = sb[j] * sb[j] * n / (n - 1.0) + 1e-6;
        want += (ma[j] - mb[j]).powi(2) + (va.sqrt() - vb.sqrt()).powi(2);
    }
    let got = frechet_distance(&cloud(factorial(&ma, &sa)), &cloud(factorial(&mb, &sb))).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

/// Every fixture check, in order.
pub const ALL: [(&str, fn()); 7] = [
    ("text_metrics_match_oracles_on_fixture", text_metrics_match_oracles_on_fixture),
    ("hand_values", hand_values),
    ("cider_unchanged_by_duplicating_the_corpus", cider_unchanged_by_duplicating_the_corpus),
    ("auroc_matches_pair_counting", auroc_matches_pair_counting),
    ("finding_f1_matches_set_arithmetic", finding_f1_matches_set_arithmetic),
    ("frechet_one_dimensional_closed_form", frechet_one_dimensional_closed_form),
    ("frechet_diagonal_closed_form", frechet_diagonal_closed_form),
];
