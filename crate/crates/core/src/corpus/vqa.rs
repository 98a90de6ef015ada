//! Question families answerable from a film's ground truth.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::findings::{FindingKind, FindingSpec, Side};
use super::grammar::tokenize;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionFamily {
    Presence,
    Location,
    Count,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaItem {
    pub family: QuestionFamily,
    /// The finding a presence or location question asks about.
    pub subject: Option<FindingKind>,
    pub question: Vec<String>,
    pub answer: Vec<String>,
    /// `yes` / `no` for presence questions, otherwise the categorical answer.
    pub answer_class: String,
}

fn noun_phrase(kind: FindingKind) -> &'static str {
    match kind {
        FindingKind::Nodule => "a nodule",
        FindingKind::Opacity => "an opacity",
        FindingKind::Effusion => "a pleural effusion",
        FindingKind::Cardiomegaly => "cardiomegaly",
    }
}

pub fn presence_question(kind: FindingKind, variant: usize) -> Vec<String> {
    let np = noun_phrase(kind);
    match variant % 2 {
        0 => tokenize(&format!("is there {np} ?")),
        _ => tokenize(&format!("does this film show {np} ?")),
    }
}

fn location_noun(kind: FindingKind) -> &'static str {
    match kind {
        FindingKind::Nodule => "nodule",
        FindingKind::Opacity => "opacity",
        _ => "effusion",
    }
}

fn side_answer(side: Side) -> &'static str {
    match side {
        Side::Left => "left",
        Side::Right => "right",
        _ => "both",
    }
}

fn item(family: QuestionFamily, subject: Option<FindingKind>, question: Vec<String>, answer: &str) -> VqaItem {
    VqaItem {
        family,
        subject,
        question,
        answer: tokenize(answer),
        answer_class: answer.to_string(),
    }
}

pub fn presence(findings: &[FindingSpec], kind: FindingKind, variant: usize) -> VqaItem {
    let present = findings.iter().any(|f| f.kind == kind);
    let answer = if present { "yes" } else { "no" };
    item(QuestionFamily::Presence, Some(kind), presence_question(kind, variant), answer)
}

pub fn count(findings: &[FindingSpec]) -> VqaItem {
    let n = findings.len().min(4);
    item(QuestionFamily::Count, None, tokenize("how many findings are there ?"), &n.to_string())
}

/// Location question about a lateralised finding; `None` if the study has
/// none or the subject appears on more than one side.
pub fn location(findings: &[FindingSpec], kind: FindingKind) -> Option<VqaItem> {
    let mut sides = findings.iter().filter(|f| f.kind == kind).map(|f| f.side);
    let side = sides.next()?;
    if sides.next().is_some() || side == Side::NotApplicable {
        return None;
    }
    let q = tokenize(&format!("which side is the {} on ?", location_noun(kind)));
    Some(item(QuestionFamily::Location, Some(kind), q, side_answer(side)))
}

/// Samples one question: presence with probability 1/2, location 1/4 (when a
/// lateralised finding exists, presence otherwise) and count 1/4.
pub fn make_vqa(findings: &[FindingSpec], question_seed: u64) -> VqaItem {
    let mut rng = seed::rng_for(question_seed, "vqa", 0);
    let roll: f64 = rng.gen();
    let variant = rng.gen_range(0..2);
    let kind = *FindingKind::ALL.choose(&mut rng).expect("non-empty");
    if roll < 0.25 {
        return count(findings);
    }
    if roll < 0.5 {
        let candidates: Vec<FindingKind> = FindingKind::ALL
            .into_iter()
            .filter(|&k| location(findings, k).is_some())
            .collect();
        if let Some(&k) = candidates.choose(&mut rng) {
            return location(findings, k).expect("candidate has a location");
        }
    }
    presence(findings, kind, variant)
}
