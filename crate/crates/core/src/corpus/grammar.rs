//! Closed-vocabulary report grammar and the rule-based finding extractor.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::findings::{FindingKind, FindingLabel, FindingSpec, LabelSet, Severity, Side};
use crate::seed;

/// Every word the grammar, question families and instruction templates can
/// emit, plus a handful of radiology filler words. Sorted, no duplicates.
pub const VOCAB: [&str; 119] = [
    ",", ".", "0", "1", "2", "3", "4", "?", "a", "abnormality", "about", "acute", "airspace",
    "also", "an", "and", "answer", "appearance", "are", "at", "base", "bases", "be", "bilateral",
    "bony", "both", "cardiac", "cardiomegaly", "cardiopulmonary", "change", "chest", "clear",
    "compared", "consolidation", "contour", "contours", "density", "describe", "does", "draw",
    "effusion", "enlarged", "evidence", "film", "findings", "fluid", "focal", "for", "generate",
    "heart", "how", "image", "in", "intact", "interval", "is", "large", "left", "lesion", "limits",
    "lower", "lung", "lungs", "many", "markedly", "mass", "may", "mediastinal", "mediastinum",
    "mild", "mildly", "moderate", "moderately", "new", "no", "nodular", "nodule", "normal", "noted",
    "of", "on", "opacity", "pleural", "pneumothorax", "prior", "pulmonary", "question",
    "radiograph", "report", "right", "seen", "severe", "severely", "show", "shows", "side", "sides",
    "silhouette", "size", "small", "soft", "stable", "structures", "the", "there", "this", "tissue",
    "tissues", "unchanged", "upper", "view", "visible", "which", "with", "within", "write", "yes",
    "zone", "zones",
];

/// Splits on whitespace, lowercases, and detaches `.`, `?` and `,` into
/// their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut word = String::new();
        for ch in raw.chars() {
            if matches!(ch, '.' | '?' | ',') {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

pub fn in_vocab(token: &str) -> bool {
    VOCAB.binary_search(&token).is_ok()
}

/// A grammar-rendered report with the labels it expresses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub tokens: Vec<String>,
    pub findings: LabelSet,
}

impl Report {
    pub fn text(&self) -> String {
        detokenize(&self.tokens)
    }
}

const NORMAL_POOL: [&str; 4] = [
    "no acute findings .",
    "the lungs are clear .",
    "no acute cardiopulmonary abnormality .",
    "normal chest radiograph .",
];

fn severity_adjective<R: Rng>(sev: Severity, rng: &mut R) -> &'static str {
    let pool: &[&str] = match sev {
        Severity::Mild => &["mild", "small"],
        Severity::Moderate => &["moderate"],
        Severity::Severe => &["severe", "large"],
    };
    pool.choose(rng).expect("non-empty pool")
}

fn severity_adverb<R: Rng>(sev: Severity, rng: &mut R) -> &'static str {
    let pool: &[&str] = match sev {
        Severity::Mild => &["mildly"],
        Severity::Moderate => &["moderately"],
        Severity::Severe => &["severely", "markedly"],
    };
    pool.choose(rng).expect("non-empty pool")
}

fn sentence<R: Rng>(f: &FindingLabel, rng: &mut R) -> String {
    let sev = f.severity.unwrap_or(Severity::Moderate);
    let side = f.side.name();
    let pattern = rng.gen_range(0..3);
    match f.kind {
        FindingKind::Nodule => {
            let adj = severity_adjective(sev, rng);
            match pattern {
                0 => format!("there is a {adj} nodule in the {side} lung ."),
                1 => format!("a {adj} {side} pulmonary nodule is noted ."),
                _ => format!("the {side} lung shows a {adj} nodular density ."),
            }
        }
        FindingKind::Opacity => {
            let adj = severity_adjective(sev, rng);
            match pattern {
                0 => format!("there is {adj} airspace opacity in the {side} lung ."),
                1 => format!("{adj} {side} consolidation is seen ."),
                _ => format!("the {side} lung shows {adj} airspace opacity ."),
            }
        }
        FindingKind::Effusion => {
            let adj = severity_adjective(sev, rng);
            let both = f.side == Side::Bilateral;
            match pattern {
                0 => format!("{adj} {side} pleural effusion ."),
                1 if both => format!("there is a {adj} pleural effusion on both sides ."),
                1 => format!("there is a {adj} pleural effusion on the {side} side ."),
                _ if both => format!("{adj} pleural fluid at both bases ."),
                _ => format!("{adj} pleural fluid at the {side} base ."),
            }
        }
        FindingKind::Cardiomegaly => match pattern {
            0 => {
                let adj = match sev {
                    Severity::Mild => "mild",
                    Severity::Moderate => "moderate",
                    Severity::Severe => "severe",
                };
                format!("{adj} cardiomegaly .")
            }
            1 => format!("the heart is {} enlarged .", severity_adverb(sev, rng)),
            _ => format!("the cardiac silhouette is {} enlarged .", severity_adverb(sev, rng)),
        },
    }
}

/// Renders one sentence per finding in canonical `(kind, side)` order, or a
/// normal-study sentence for an empty set.
pub fn render_report(findings: &[FindingSpec], grammar_seed: u64) -> Report {
    let labels: LabelSet = findings.iter().map(FindingSpec::label).collect();
    render_labels(&labels, grammar_seed)
}

pub fn render_labels(labels: &LabelSet, grammar_seed: u64) -> Report {
    let mut rng = seed::rng_for(grammar_seed, "report", 0);
    let text = if labels.is_empty() {
        NORMAL_POOL.choose(&mut rng).expect("non-empty pool").to_string()
    } else {
        labels.iter().map(|l| sentence(l, &mut rng)).collect::<Vec<_>>().join(" ")
    };
    Report { tokens: tokenize(&text), findings: labels.clone() }
}

fn kind_of(token: &str) -> Option<FindingKind> {
    Some(match token {
        "nodule" | "nodular" => FindingKind::Nodule,
        "opacity" | "consolidation" | "airspace" => FindingKind::Opacity,
        "effusion" | "fluid" => FindingKind::Effusion,
        "cardiomegaly" | "enlarged" => FindingKind::Cardiomegaly,
        _ => return None,
    })
}

fn side_of(token: &str) -> Option<Side> {
    Some(match token {
        "left" => Side::Left,
        "right" => Side::Right,
        "bilateral" | "both" => Side::Bilateral,
        _ => return None,
    })
}

fn severity_of(token: &str) -> Option<Severity> {
    Some(match token {
        "mild" | "small" | "mildly" => Severity::Mild,
        "moderate" | "moderately" => Severity::Moderate,
        "severe" | "large" | "severely" | "markedly" => Severity::Severe,
        _ => return None,
    })
}

/// Keyword matcher over sentences. Every (kind, side, severity) combination
/// mentioned in a sentence is returned; contradictions are not arbitrated.
/// Lateral kinds without a side word in their sentence are dropped, and
/// cardiomegaly always carries side `n/a`.
pub fn extract_findings(text: &str) -> LabelSet {
    extract_from_tokens(&tokenize(text))
}

pub fn extract_from_tokens(tokens: &[String]) -> LabelSet {
    let mut out = LabelSet::new();
    for sent in tokens.split(|t| t == ".") {
        let mut kinds = Vec::new();
        let mut sides = Vec::new();
        let mut sevs = Vec::new();
        for t in sent {
            if let Some(k) = kind_of(t) {
                kinds.push(k);
            }
            if let Some(s) = side_of(t) {
                sides.push(s);
            }
            if let Some(s) = severity_of(t) {
                sevs.push(s);
            }
        }
        let sevs: Vec<Option<Severity>> =
            if sevs.is_empty() { vec![None] } else { sevs.into_iter().map(Some).collect() };
        for &kind in &kinds {
            let allowed = kind.allowed_sides();
            let kind_sides: Vec<Side> = if kind == FindingKind::Cardiomegaly {
                vec![Side::NotApplicable]
            } else {
                sides.iter().copied().filter(|s| allowed.contains(s)).collect()
            };
            for &side in &kind_sides {
                for &severity in &sevs {
                    out.insert(FindingLabel { kind, side, severity });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::render::sample_geometry;

    #[test]
    fn vocab_is_sorted_and_unique() {
        assert!(VOCAB.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Is there a Nodule?"), ["is", "there", "a", "nodule", "?"]);
        assert_eq!(tokenize("  no acute findings. "), ["no", "acute", "findings", "."]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn empty_set_renders_normal_sentence() {
        let r = render_report(&[], 3);
        assert!(NORMAL_POOL.contains(&r.text().as_str()));
        assert!(extract_from_tokens(&r.tokens).is_empty());
    }

    #[test]
    fn round_trip_over_seeded_sweep() {
        let mut rng = seed::rng(2024);
        for case in 0..200u64 {
            let mut findings = Vec::new();
            for kind in FindingKind::ALL {
                if rng.gen_bool(0.5) {
                    let side = *kind.allowed_sides().choose(&mut rng).unwrap();
                    let sev = *Severity::ALL.choose(&mut rng).unwrap();
                    findings.push(sample_geometry(kind, side, sev, &mut rng));
                }
            }
            let report = render_report(&findings, case);
            assert!(report.tokens.iter().all(|t| in_vocab(t)), "{}", report.text());
            assert_eq!(extract_from_tokens(&report.tokens), report.findings, "{}", report.text());
        }
    }

    #[test]
    fn paraphrases_share_labels() {
        let mut rng = seed::rng(1);
        let f = [sample_geometry(FindingKind::Effusion, Side::Bilateral, Severity::Mild, &mut rng)];
        let texts: std::collections::BTreeSet<String> = (0..30).map(|s| render_report(&f, s).text()).collect();
        assert!(texts.len() > 1);
        for t in &texts {
            assert_eq!(extract_findings(t), render_report(&f, 0).findings);
        }
    }

    #[test]
    fn contradictory_sides_are_both_reported() {
        let got = extract_findings("a mild nodule in the left and right lung .");
        let sides: Vec<Side> = got.iter().map(|l| l.side).collect();
        assert_eq!(sides, [Side::Left, Side::Right]);
    }

    #[test]
    fn unknown_words_are_ignored() {
        let got = extract_findings("zzz moderate cardiomegaly qqq .");
        assert_eq!(got.len(), 1);
        assert!(extract_findings("").is_empty());
    }
}
