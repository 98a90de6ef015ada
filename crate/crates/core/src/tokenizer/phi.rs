//! The frozen feature encoder φ: a finding-presence classifier whose
//! penultimate activations serve as perceptual features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TokenizerError;
use crate::corpus::{Corpus, FindingKind, Split};
use crate::eval::{auroc, ScoredBinary};
use crate::nn::{add_linear, linear, params_hash, PatchLayout};
use crate::seed;
use crate::tensor::{adam_step, AdamConfig, AdamState, ParamSet, PoolMode, Tape, Tensor, Var};

pub const FEATURE_DIM: usize = 32;
const PATCH: usize = 4;
const LOCAL: usize = 32;
const GLOBAL: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PhiConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Macro validation AUROC below this is a training failure.
    pub min_auroc: f64,
}

impl Default for PhiConfig {
    fn default() -> Self {
        Self { steps: 1000, batch: 16, lr: 3e-3, min_auroc: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEncoder {
    pub params: ParamSet,
    pub height: usize,
    pub width: usize,
    pub frozen: bool,
}

/// Slots of each layer's weight in the parameter set.
struct Slots {
    patch: usize,
    pos: usize,
    local: usize,
    global: usize,
    feat: usize,
    head: usize,
}

const SLOTS: Slots = Slots { patch: 0, pos: 2, local: 3, global: 5, feat: 7, head: 9 };

pub struct PhiOutput {
    pub features: Var,
    pub logits: Var,
}

impl FeatureEncoder {
    pub fn init(height: usize, width: usize, seed_value: u64) -> Result<Self, TokenizerError> {
        if height % PATCH != 0 || width % PATCH != 0 {
            return Err(TokenizerError::Shape(format!("φ input {height}x{width} not divisible by {PATCH}")));
        }
        let mut rng = seed::rng_for(seed_value, "phi-init", 0);
        let mut p = ParamSet::new();
        let n_patches = (height / PATCH) * (width / PATCH);
        add_linear(&mut p, "phi.patch", PATCH * PATCH, LOCAL, None, &mut rng);
        p.add("phi.pos", Tensor::zeros(&[n_patches, LOCAL]));
        add_linear(&mut p, "phi.local", LOCAL, LOCAL, None, &mut rng);
        add_linear(&mut p, "phi.global", height * width, GLOBAL, None, &mut rng);
        add_linear(&mut p, "phi.feat", 2 * LOCAL + GLOBAL, FEATURE_DIM, None, &mut rng);
        add_linear(&mut p, "phi.head", FEATURE_DIM, FindingKind::ALL.len(), None, &mut rng);
        Ok(Self { params: p, height, width, frozen: false })
    }

    pub fn hash(&self) -> String {
        params_hash(&self.params)
    }

    fn layout(&self) -> PatchLayout {
        PatchLayout { height: self.height, width: self.width, patch: PATCH }
    }

    /// Forward pass for a `[B, H, W]` image batch already on the tape.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], images: Var) -> Result<PhiOutput, TokenizerError> {
        let shape = tape.value(images).shape().to_vec();
        let hw = self.height * self.width;
        let batch = tape.value(images).len() / hw;
        if shape.len() < 2 || shape[shape.len() - 2..] != [self.height, self.width] || batch * hw != tape.value(images).len() {
            return Err(TokenizerError::Shape(format!(
                "φ expects [B, {}, {}] images, got {shape:?}",
                self.height, self.width
            )));
        }
        let layout = self.layout();
        let per = layout.patches_per_image();
        let patches = tape.gather(images, layout.patchify_index(batch), &[batch * per, PATCH * PATCH])?;
        let local = linear(tape, vars, SLOTS.patch, patches)?;
        let pos = tape.gather_rows(vars[SLOTS.pos], (0..batch * per).map(|r| r % per).collect())?;
        let local = tape.add(local, pos)?;
        let local = tape.gelu(local);
        let local = linear(tape, vars, SLOTS.local, local)?;
        let local = tape.gelu(local);
        let mean = tape.pool_rows(local, per, PoolMode::Mean)?;
        let max = tape.pool_rows(local, per, PoolMode::Max)?;
        let flat = tape.reshape(images, &[batch, hw])?;
        let global = linear(tape, vars, SLOTS.global, flat)?;
        let joined = tape.concat_cols(&[mean, max, global])?;
        let pre = linear(tape, vars, SLOTS.feat, joined)?;
        let features = tape.tanh(pre);
        let logits = linear(tape, vars, SLOTS.head, features)?;
        Ok(PhiOutput { features, logits })
    }

    /// Untracked features and logits for a flat batch of images.
    pub fn run(&self, images: &[f64]) -> Result<(Tensor, Tensor), TokenizerError> {
        let batch = images.len() / (self.height * self.width);
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.leaf(Tensor::new(vec![batch, self.height, self.width], images.to_vec())?);
        let out = self.forward(&mut tape, &vars, x)?;
        Ok((tape.value(out.features).clone(), tape.value(out.logits).clone()))
    }

    /// `[B, 32]` feature matrix, evaluated in chunks.
    pub fn features(&self, images: &[f64]) -> Result<Tensor, TokenizerError> {
        let hw = self.height * self.width;
        let n = images.len() / hw;
        let mut data = Vec::with_capacity(n * FEATURE_DIM);
        for chunk in images.chunks(64 * hw) {
            data.extend_from_slice(self.run(chunk)?.0.data());
        }
        Ok(Tensor::new(vec![n, FEATURE_DIM], data)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiReport {
    pub val_auroc: Vec<(FindingKind, f64)>,
    pub macro_auroc: f64,
    pub final_loss: f64,
}

fn presence_targets(corpus: &Corpus, idx: usize) -> [f64; 4] {
    let mut t = [0.0; 4];
    for f in &corpus.items[idx].findings {
        t[f.kind.index()] = 1.0;
    }
    t
}

fn gather_pixels(corpus: &Corpus, idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| corpus.items[i].pixels.iter().copied()).collect()
}

/// Per-kind AUROC of φ's presence logits on `split`.
pub fn phi_auroc(phi: &FeatureEncoder, corpus: &Corpus, split: Split) -> Result<Vec<(FindingKind, f64)>, TokenizerError> {
    let idx = corpus.split_indices(split);
    let mut scores: Vec<Vec<ScoredBinary>> = vec![Vec::new(); 4];
    for chunk in idx.chunks(64) {
        let (_, logits) = phi.run(&gather_pixels(corpus, chunk))?;
        for (r, &i) in chunk.iter().enumerate() {
            let t = presence_targets(corpus, i);
            for k in 0..4 {
                scores[k].push(ScoredBinary { score: logits.data()[r * 4 + k], label: t[k] == 1.0 });
            }
        }
    }
    FindingKind::ALL
        .into_iter()
        .zip(scores)
        .map(|(kind, s)| {
            auroc(&s)
                .map(|a| (kind, a))
                .map_err(|e| TokenizerError::TrainingFailure(format!("φ AUROC for {kind}: {e}")))
        })
        .collect()
}

/// Trains φ as a multi-label presence classifier on the training split and
/// freezes it.
pub fn pretrain_phi(corpus: &Corpus, cfg: &PhiConfig, seed_value: u64) -> Result<(FeatureEncoder, PhiReport), TokenizerError> {
    let first = corpus.items.first().ok_or_else(|| TokenizerError::Contract("empty corpus".into()))?;
    let mut phi = FeatureEncoder::init(first.height, first.width, seed_value)?;
    let train = corpus.split_indices(Split::Train);
    if train.is_empty() || cfg.batch == 0 {
        return Err(TokenizerError::Contract("φ needs training images and batch > 0".into()));
    }
    let mut rng = seed::rng_for(seed_value, "phi-batches", 0);
    let mut adam = AdamState::new(phi.params.tensors());
    let opt = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut order = train.clone();
    let mut cursor = order.len();
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut tape = Tape::new();
        let vars = phi.params.bind(&mut tape, true);
        let x = tape.leaf(Tensor::new(vec![batch.len(), phi.height, phi.width], gather_pixels(corpus, &batch))?);
        let out = phi.forward(&mut tape, &vars, x)?;
        let targets: Vec<f64> = batch.iter().flat_map(|&i| presence_targets(corpus, i)).collect();
        let loss = tape.bce_with_logits(out.logits, &targets)?;
        final_loss = tape.value(loss).item();
        if !final_loss.is_finite() {
            return Err(TokenizerError::NonFinite { step, detail: "φ loss".into(), last_good: None });
        }
        tape.backward(loss)?;
        let grads = ParamSet::collect_grads(&tape, &vars);
        adam_step(phi.params.tensors_mut(), &grads, &mut adam, &opt)?;
    }
    phi.frozen = true;
    let val_split = if corpus.split_indices(Split::Val).is_empty() { Split::Train } else { Split::Val };
    let val_auroc = phi_auroc(&phi, corpus, val_split)?;
    let macro_auroc = val_auroc.iter().map(|(_, a)| a).sum::<f64>() / val_auroc.len() as f64;
    if macro_auroc < cfg.min_auroc {
        return Err(TokenizerError::TrainingFailure(format!(
            "φ reached macro AUROC {macro_auroc:.3} < {} after {} steps",
            cfg.min_auroc, cfg.steps
        )));
    }
    Ok((phi, PhiReport { val_auroc, macro_auroc, final_loss }))
}
