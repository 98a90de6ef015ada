use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::render::Anatomy;
use super::CorpusError;

/// Pathology classes rendered into the synthetic films. A normal study is
/// the empty finding set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Nodule,
    Opacity,
    Effusion,
    Cardiomegaly,
}

impl FindingKind {
    /// Canonical report order.
    pub const ALL: [FindingKind; 4] = [
        FindingKind::Nodule,
        FindingKind::Opacity,
        FindingKind::Effusion,
        FindingKind::Cardiomegaly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FindingKind::Nodule => "nodule",
            FindingKind::Opacity => "opacity",
            FindingKind::Effusion => "effusion",
            FindingKind::Cardiomegaly => "cardiomegaly",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Sides a finding of this kind may be reported with.
    pub fn allowed_sides(self) -> &'static [Side] {
        match self {
            FindingKind::Nodule | FindingKind::Opacity => &[Side::Left, Side::Right],
            FindingKind::Effusion => &[Side::Left, Side::Right, Side::Bilateral],
            FindingKind::Cardiomegaly => &[Side::NotApplicable],
        }
    }
}

impl fmt::Display for FindingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Patient side. Films follow the radiological convention: the patient's
/// right lung is drawn on the left half of the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, schemars::JsonSchema)]
pub enum Side {
    #[serde(rename = "left")]
    Left,
    #[serde(rename = "right")]
    Right,
    #[serde(rename = "bilateral")]
    Bilateral,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Bilateral => "bilateral",
            Side::NotApplicable => "n/a",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Side::Left, Side::Right, Side::Bilateral, Side::NotApplicable]
            .into_iter()
            .find(|v| v.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Moderate, Severity::Severe];
}

/// One ground-truth finding with its geometry in normalised image
/// coordinates (`x` left→right, `y` top→bottom, both in `[0, 1]`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingSpec {
    pub kind: FindingKind,
    pub side: Side,
    pub severity: Severity,
    pub center: [f64; 2],
    /// Normalised radius (nodule, opacity), fluid depth (effusion) or cardiac
    /// half-width (cardiomegaly).
    pub size: f64,
}

/// The part of a finding that reports can express.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FindingLabel {
    pub kind: FindingKind,
    pub side: Side,
    pub severity: Option<Severity>,
}

pub type LabelSet = BTreeSet<FindingLabel>;

impl FindingSpec {
    pub fn label(&self) -> FindingLabel {
        FindingLabel { kind: self.kind, side: self.side, severity: Some(self.severity) }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |why: String| Err(CorpusError::InvalidFinding(format!("{self:?}: {why}")));
        if !self.kind.allowed_sides().contains(&self.side) {
            return bad(format!("side {} not allowed for {}", self.side.name(), self.kind));
        }
        if !(self.size > 0.0 && self.size <= 0.25) {
            return bad("size must lie in (0, 0.25]".into());
        }
        let [x, y] = self.center;
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return bad("center outside the unit square".into());
        }
        // The cardiac center sits in the mediastinum; every other finding must
        // be anchored inside a lung field.
        if self.kind != FindingKind::Cardiomegaly && !Anatomy::default().in_lung(x, y) {
            return bad("center outside the lung fields".into());
        }
        Ok(())
    }
}

/// Validates a finding set: each finding individually, and at most one
/// cardiomegaly.
pub fn validate_set(findings: &[FindingSpec]) -> Result<(), CorpusError> {
    for f in findings {
        f.validate()?;
    }
    let cardiac = findings.iter().filter(|f| f.kind == FindingKind::Cardiomegaly).count();
    if cardiac > 1 {
        return Err(CorpusError::InvalidFinding(format!("{cardiac} cardiomegaly findings in one study")));
    }
    Ok(())
}

pub fn labels_of(findings: &[FindingSpec]) -> LabelSet {
    findings.iter().map(FindingSpec::label).collect()
}

/// `(kind, side)` pairs, the granularity at which finding F1 is scored.
pub fn kind_sides(labels: &LabelSet) -> BTreeSet<(FindingKind, Side)> {
    labels.iter().map(|l| (l.kind, l.side)).collect()
}
