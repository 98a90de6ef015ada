use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::findings::{FindingKind, FindingSpec, Severity, Side};
use super::grammar::{render_report, tokenize, Report};
use super::io;
use super::render::{generate_image, sample_geometry, ImageSample, Split};
use super::vqa::{make_vqa, QuestionFamily, VqaItem};
use super::CorpusError;
use crate::seed;

/// Per-kind probability of each side. Kinds draw independently; within a
/// kind the sides are mutually exclusive, so each kind's row must sum to at
/// most 1.
pub type FrequencyTable = BTreeMap<FindingKind, BTreeMap<Side, f64>>;

pub fn default_frequencies() -> FrequencyTable {
    let mut t = FrequencyTable::new();
    let row = |pairs: &[(Side, f64)]| pairs.iter().copied().collect::<BTreeMap<_, _>>();
    t.insert(FindingKind::Nodule, row(&[(Side::Left, 0.175), (Side::Right, 0.175)]));
    t.insert(FindingKind::Opacity, row(&[(Side::Left, 0.15), (Side::Right, 0.15)]));
    t.insert(
        FindingKind::Effusion,
        row(&[(Side::Left, 0.1), (Side::Right, 0.1), (Side::Bilateral, 0.05)]),
    );
    t.insert(FindingKind::Cardiomegaly, row(&[(Side::NotApplicable, 0.2)]));
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub vqa_per_sample: usize,
    pub frequencies: FrequencyTable,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 200,
            test: 200,
            seed: 0,
            height: 32,
            width: 32,
            vqa_per_sample: 2,
            frequencies: default_frequencies(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Config(m));
        if self.height < 16 || self.width < 16 {
            return bad(format!("image dims {}x{} below 16x16", self.height, self.width));
        }
        if self.train + self.val + self.test == 0 {
            return bad("corpus has no samples".into());
        }
        for (kind, row) in &self.frequencies {
            let mut total = 0.0;
            for (side, &p) in row {
                if !kind.allowed_sides().contains(side) {
                    return bad(format!("frequency for {kind}/{} but {kind} cannot take that side", side.name()));
                }
                if !p.is_finite() || p < 0.0 {
                    return bad(format!("frequency {kind}/{} = {p} is negative or not finite", side.name()));
                }
                total += p;
            }
            if total > 1.0 + 1e-12 {
                return bad(format!("frequencies for {kind} sum to {total} > 1"));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Split of the sample at global index `i`: train, then val, then test.
    pub fn split_of(&self, i: usize) -> Split {
        if i < self.train {
            Split::Train
        } else if i < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Draws a finding set from the frequency table.
pub fn sample_findings<R: Rng>(table: &FrequencyTable, rng: &mut R) -> Vec<FindingSpec> {
    let mut out = Vec::new();
    for kind in FindingKind::ALL {
        // Draws happen for every kind so that one kind's row does not shift
        // another's random stream.
        let u: f64 = rng.gen();
        let sev = Severity::ALL[rng.gen_range(0..3)];
        let mut geom_rng = seed::rng(rng.gen());
        let Some(row) = table.get(&kind) else { continue };
        let mut acc = 0.0;
        for &side in kind.allowed_sides() {
            acc += row.get(&side).copied().unwrap_or(0.0);
            if u < acc {
                out.push(sample_geometry(kind, side, sev, &mut geom_rng));
                break;
            }
        }
    }
    out
}

/// One generated study before it is written to disk.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: ImageSample,
    pub report: Report,
    pub vqa: Vec<VqaItem>,
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

fn generate_one(cfg: &CorpusConfig, index: usize) -> Result<Sample, CorpusError> {
    let sample_seed = seed::derive(cfg.seed, "sample", index as u64);
    let findings = sample_findings(&cfg.frequencies, &mut seed::rng_for(sample_seed, "findings", 0));
    let image = generate_image(sample_seed, &findings, cfg.height, cfg.width, cfg.split_of(index))?;
    let report = render_report(&findings, seed::derive(sample_seed, "grammar", 0));
    let vqa = (0..cfg.vqa_per_sample)
        .map(|j| make_vqa(&findings, seed::derive(sample_seed, "question", j as u64)))
        .collect();
    Ok(Sample { id: sample_id(index), image, report, vqa })
}

/// Generates every sample in index order. The result does not depend on
/// `workers`.
pub fn generate_samples(cfg: &CorpusConfig, workers: usize) -> Result<Vec<Sample>, CorpusError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CorpusError::Config(format!("worker pool: {e}")))?;
    pool.install(|| (0..cfg.total()).into_par_iter().map(|i| generate_one(cfg, i)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub image_path: String,
    pub report_text: String,
    pub findings: Vec<FindingSpec>,
    pub split: Split,
    pub sample_seed: u64,
    #[serde(default)]
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub id: String,
    pub sample_id: String,
    pub image_path: String,
    pub question: String,
    pub answer: String,
    pub answer_class: String,
    pub family: QuestionFamily,
    pub subject: Option<FindingKind>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub counts: BTreeMap<Split, usize>,
    pub vqa_count: usize,
    /// Number of studies carrying each `kind/side` label.
    pub label_counts: BTreeMap<String, usize>,
    pub clamped_images: usize,
}

impl CorpusManifest {
    pub fn prevalence(&self, kind: FindingKind) -> f64 {
        let n: usize = self
            .label_counts
            .iter()
            .filter(|(k, _)| k.split('/').next() == Some(kind.name()))
            .map(|(_, &v)| v)
            .sum();
        n as f64 / self.config.total() as f64
    }
}

fn records(samples: &[Sample]) -> (Vec<PairRecord>, Vec<VqaRecord>) {
    let mut pairs = Vec::with_capacity(samples.len());
    let mut vqa = Vec::new();
    for s in samples {
        let image_path = format!("images/{}.pgm", s.id);
        pairs.push(PairRecord {
            id: s.id.clone(),
            image_path: image_path.clone(),
            report_text: s.report.text(),
            findings: s.image.findings.clone(),
            split: s.image.split,
            sample_seed: s.image.sample_seed,
            clamped: s.image.clamped,
        });
        for (j, item) in s.vqa.iter().enumerate() {
            vqa.push(VqaRecord {
                id: format!("{}-q{j}", s.id),
                sample_id: s.id.clone(),
                image_path: image_path.clone(),
                question: item.question.join(" "),
                answer: item.answer.join(" "),
                answer_class: item.answer_class.clone(),
                family: item.family,
                subject: item.subject,
                split: s.image.split,
            });
        }
    }
    (pairs, vqa)
}

fn manifest_of(cfg: &CorpusConfig, pairs: &[PairRecord], vqa_count: usize) -> CorpusManifest {
    let mut counts = BTreeMap::new();
    let mut label_counts = BTreeMap::new();
    for p in pairs {
        *counts.entry(p.split).or_insert(0) += 1;
        for f in &p.findings {
            *label_counts.entry(format!("{}/{}", f.kind, f.side.name())).or_insert(0) += 1;
        }
    }
    CorpusManifest {
        config: cfg.clone(),
        counts,
        vqa_count,
        label_counts,
        clamped_images: pairs.iter().filter(|p| p.clamped).count(),
    }
}

/// Generates the corpus and writes `images/*.pgm`, `pairs.jsonl`,
/// `vqa.jsonl` and `manifest.json` under `out`.
pub fn build_corpus(cfg: &CorpusConfig, out: &Path, workers: usize) -> Result<CorpusManifest, CorpusError> {
    let samples = generate_samples(cfg, workers)?;
    let images = out.join("images");
    fs::create_dir_all(&images)
        .map_err(|source| CorpusError::Io { path: images.display().to_string(), source })?;
    for s in &samples {
        let img = &s.image;
        io::write_pgm(&images.join(format!("{}.pgm", s.id)), &img.pixels, img.height, img.width, &s.id)?;
    }
    let (pairs, vqa) = records(&samples);
    io::write_jsonl(&out.join("pairs.jsonl"), &pairs)?;
    io::write_jsonl(&out.join("vqa.jsonl"), &vqa)?;
    let manifest = manifest_of(cfg, &pairs, vqa.len());
    let path = out.join("manifest.json");
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| CorpusError::Format(e.to_string()))?;
    json.push(b'\n');
    fs::write(&path, json).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    Ok(manifest)
}

/// A study as the models see it: 8-bit quantised pixels and tokenised text.
#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub id: String,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub findings: Vec<FindingSpec>,
    pub report: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct CorpusVqa {
    pub record: VqaRecord,
    /// Index into [`Corpus::items`].
    pub item: usize,
    pub question: Vec<String>,
    pub answer: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub items: Vec<CorpusItem>,
    pub vqa: Vec<CorpusVqa>,
}

impl Corpus {
    /// Builds the in-memory view that [`Corpus::load`] would return for the
    /// same samples, without touching disk.
    pub fn from_samples(cfg: &CorpusConfig, samples: &[Sample]) -> Self {
        let (pairs, vqa) = records(samples);
        let manifest = manifest_of(cfg, &pairs, vqa.len());
        let items = samples
            .iter()
            .zip(&pairs)
            .map(|(s, p)| CorpusItem {
                id: p.id.clone(),
                split: p.split,
                height: s.image.height,
                width: s.image.width,
                pixels: s.image.pixels.iter().map(|&v| io::quantize(v) as f64 / 255.0).collect(),
                findings: p.findings.clone(),
                report: s.report.tokens.clone(),
            })
            .collect();
        Self::assemble(manifest, items, vqa)
    }

    pub fn generate(cfg: &CorpusConfig, workers: usize) -> Result<Self, CorpusError> {
        Ok(Self::from_samples(cfg, &generate_samples(cfg, workers)?))
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path)
            .map_err(|source| CorpusError::Io { path: manifest_path.display().to_string(), source })?;
        let manifest: CorpusManifest = serde_json::from_str(&text)
            .map_err(|e| CorpusError::Format(format!("{}: {e}", manifest_path.display())))?;
        let pairs: Vec<PairRecord> = io::read_jsonl(&dir.join("pairs.jsonl"))?;
        let vqa: Vec<VqaRecord> = io::read_jsonl(&dir.join("vqa.jsonl"))?;
        let mut items = Vec::with_capacity(pairs.len());
        for p in pairs {
            let path: PathBuf = dir.join(&p.image_path);
            let (height, width, pixels) = io::read_pgm(&path)?;
            items.push(CorpusItem {
                id: p.id,
                split: p.split,
                height,
                width,
                pixels,
                findings: p.findings,
                report: tokenize(&p.report_text),
            });
        }
        Ok(Self::assemble(manifest, items, vqa))
    }

    fn assemble(manifest: CorpusManifest, items: Vec<CorpusItem>, vqa: Vec<VqaRecord>) -> Self {
        let index: BTreeMap<&str, usize> = items.iter().enumerate().map(|(i, it)| (it.id.as_str(), i)).collect();
        let vqa = vqa
            .into_iter()
            .filter_map(|record| {
                let item = *index.get(record.sample_id.as_str())?;
                Some(CorpusVqa {
                    question: tokenize(&record.question),
                    answer: tokenize(&record.answer),
                    item,
                    record,
                })
            })
            .collect();
        Self { manifest, items, vqa }
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == split).collect()
    }

    pub fn vqa_indices(&self, split: Split) -> Vec<usize> {
        (0..self.vqa.len()).filter(|&i| self.vqa[i].record.split == split).collect()
    }
}
