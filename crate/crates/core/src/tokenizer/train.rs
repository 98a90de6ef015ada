use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{clinical_recon_loss, LossWeights, ReconParts};
use super::phi::FeatureEncoder;
use super::vq::{nearest_codes, TokenizerArch, VqTokenizer, LAYERS};
use super::TokenizerError;
use crate::corpus::{Corpus, Split};
use crate::seed;
use crate::tensor::{adam_step, AdamConfig, AdamState, ParamSet, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weights: LossWeights,
    /// Codes unused for this many steps are re-seeded from batch latents.
    /// Restarts stop after 80% of the budget. 0 disables them.
    pub restart_every: usize,
    /// Training fails when mean validation pixel error ends above this.
    pub max_val_pixel: f64,
    /// Validation images scored at the end of training (0 = all).
    pub val_limit: usize,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 16,
            lr: 1e-3,
            weights: LossWeights::default(),
            restart_every: 100,
            max_val_pixel: 0.1,
            val_limit: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub total: f64,
    pub pixel: f64,
    pub grad: f64,
    pub feat: f64,
    pub codebook: f64,
    pub commit: f64,
}

impl CurveRow {
    /// The objective actually minimised at this step.
    pub fn objective(&self, beta: f64) -> f64 {
        self.total + self.codebook + beta * self.commit
    }
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("step,total,pixel,grad,feat,codebook,commit\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.total, r.pixel, r.grad, r.feat, r.codebook, r.commit
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TokenizerRun {
    pub tokenizer: VqTokenizer,
    pub curve: Vec<CurveRow>,
    /// Mean reconstruction parts over the validation images, after
    /// quantisation.
    pub val: ReconParts,
    pub usage: Vec<u64>,
    pub usage_fraction: f64,
    pub dead_code_alarm: bool,
}

fn pixels_of(corpus: &Corpus, idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| corpus.items[i].pixels.iter().copied()).collect()
}

/// Code usage counts over a set of images.
pub fn code_usage(tok: &VqTokenizer, images: &[f64]) -> Result<Vec<u64>, TokenizerError> {
    let mut usage = vec![0u64; tok.arch.codebook_size];
    for seq in tok.tokenize_batch(images)? {
        for k in seq {
            usage[k] += 1;
        }
    }
    Ok(usage)
}

/// Mean reconstruction parts of the full tokenizer round trip.
pub fn evaluate_reconstruction(
    tok: &VqTokenizer,
    phi: &FeatureEncoder,
    weights: &LossWeights,
    images: &[f64],
) -> Result<ReconParts, TokenizerError> {
    let hw = tok.arch.height * tok.arch.width;
    let n = images.len() / hw;
    if n == 0 {
        return Err(TokenizerError::Contract("no images to evaluate".into()));
    }
    let mut acc = ReconParts::default();
    for chunk in images.chunks(64 * hw) {
        let b = chunk.len() / hw;
        let ids = tok.tokenize_batch(chunk)?;
        let recon = tok.detokenize_batch(&ids)?;
        let x = Tensor::new(vec![b, tok.arch.height, tok.arch.width], chunk.to_vec())?;
        let xh = Tensor::new(vec![b, tok.arch.height, tok.arch.width], recon)?;
        let p = super::loss::recon_parts(&x, &xh, weights, phi)?;
        let w = b as f64;
        acc.total += p.total * w;
        acc.pixel += p.pixel * w;
        acc.grad += p.grad * w;
        acc.feat += p.feat * w;
    }
    let n = n as f64;
    Ok(ReconParts { total: acc.total / n, pixel: acc.pixel / n, grad: acc.grad / n, feat: acc.feat / n })
}

/// Trains encoder, decoder and codebook on the training split against the
/// reconstruction loss plus codebook and commitment terms.
pub fn train_tokenizer(
    corpus: &Corpus,
    phi: &FeatureEncoder,
    arch: &TokenizerArch,
    cfg: &TokenizerTrainConfig,
    seed_value: u64,
) -> Result<TokenizerRun, TokenizerError> {
    cfg.weights.validate()?;
    if !phi.frozen {
        return Err(TokenizerError::Contract("φ must be pretrained and frozen first".into()));
    }
    let train = corpus.split_indices(Split::Train);
    if train.is_empty() || cfg.batch == 0 {
        return Err(TokenizerError::Contract("tokenizer needs training images and batch > 0".into()));
    }
    let mut tok = VqTokenizer::init(arch.clone(), seed_value)?;
    let layout = arch.layout();
    let (k, d) = (arch.codebook_size, arch.dim);
    let mut rng = seed::rng_for(seed_value, "tokenizer-batches", 0);

    // Seed the codebook with encoder outputs of random training patches.
    {
        let mut pick = train.clone();
        pick.shuffle(&mut rng);
        pick.truncate(64);
        let z = tok.encode_batch(&pixels_of(corpus, &pick))?;
        let rows = z.len() / d;
        let mut cb = Vec::with_capacity(k * d);
        for _ in 0..k {
            let r = rng.gen_range(0..rows);
            cb.extend_from_slice(&z.data()[r * d..(r + 1) * d]);
        }
        *tok.params.get_mut(LAYERS.codebook) = Tensor::new(vec![k, d], cb)?;
    }

    let phi_params = phi.params.clone();
    let opt = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut adam = AdamState::new(tok.params.tensors());
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut last_used = vec![0usize; k];
    let restart_until = cfg.steps * 4 / 5;
    let mut order = train.clone();
    let mut cursor = order.len();
    let (h, w) = (arch.height, arch.width);

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
        let b = batch.len();
        let pixels = pixels_of(corpus, &batch);

        let mut tape = Tape::new();
        let vars = tok.params.bind(&mut tape, true);
        let phi_vars = phi_params.bind(&mut tape, false);
        let x = tape.leaf(Tensor::new(vec![b, h, w], pixels.clone())?);
        let patches = tape.leaf(layout.patchify(&pixels, b));
        let z_e = tok.encode_tape(&mut tape, &vars, patches)?;
        let idx = nearest_codes(tape.value(z_e).data(), tok.codebook().data(), d)?;
        let e = tape.gather_rows(vars[LAYERS.codebook], idx.clone())?;
        let e_value = tape.value(e).clone();
        let z_q = tape.straight_through(z_e, e_value.clone())?;
        let rows = tok.decode_tape(&mut tape, &vars, z_q)?;
        let x_hat = tape.gather(rows, layout.unpatchify_index(b), &[b, h, w])?;
        let recon = clinical_recon_loss(&mut tape, x, x_hat, &cfg.weights, phi, &phi_vars)?;

        let z_const = tape.leaf(tape.value(z_e).clone());
        let e_const = tape.leaf(e_value);
        let cb_diff = tape.sub(e, z_const)?;
        let cb_sq = tape.square(cb_diff);
        let codebook_term = tape.mean(cb_sq)?;
        let cm_diff = tape.sub(z_e, e_const)?;
        let cm_sq = tape.square(cm_diff);
        let commit_term = tape.mean(cm_sq)?;
        let weighted_commit = tape.scale(commit_term, cfg.weights.beta_commit);
        let vq = tape.add(codebook_term, weighted_commit)?;
        let objective = tape.add(recon.total, vq)?;

        let parts = recon.values(&tape);
        let row = CurveRow {
            step,
            total: parts.total,
            pixel: parts.pixel,
            grad: parts.grad,
            feat: parts.feat,
            codebook: tape.value(codebook_term).item(),
            commit: tape.value(commit_term).item(),
        };
        if !tape.value(objective).item().is_finite() {
            return Err(TokenizerError::NonFinite {
                step,
                detail: format!("tokenizer loss {row:?}"),
                last_good: Some(Box::new(tok)),
            });
        }
        curve.push(row);
        let snapshot = tok.clone();
        tape.backward(objective).map_err(|e| TokenizerError::NonFinite {
            step,
            detail: e.to_string(),
            last_good: Some(Box::new(snapshot.clone())),
        })?;
        let grads = ParamSet::collect_grads(&tape, &vars);
        adam_step(tok.params.tensors_mut(), &grads, &mut adam, &opt)?;
        if !tok.params.all_finite() {
            return Err(TokenizerError::NonFinite {
                step,
                detail: "non-finite parameters after update".into(),
                last_good: Some(Box::new(snapshot)),
            });
        }

        for &i in &idx {
            last_used[i] = step;
        }
        if cfg.restart_every > 0 && step < restart_until && (step + 1) % cfg.restart_every == 0 {
            let z = tape.value(z_e).data();
            let n_rows = z.len() / d;
            let cb = tok.params.get_mut(LAYERS.codebook).data_mut();
            for code in 0..k {
                if step + 1 - last_used[code] >= cfg.restart_every {
                    let r = rng.gen_range(0..n_rows);
                    cb[code * d..(code + 1) * d].copy_from_slice(&z[r * d..(r + 1) * d]);
                    last_used[code] = step;
                }
            }
        }
    }

    let mut val_idx = corpus.split_indices(Split::Val);
    if val_idx.is_empty() {
        val_idx = train.clone();
    }
    if cfg.val_limit > 0 {
        val_idx.truncate(cfg.val_limit);
    }
    let val = evaluate_reconstruction(&tok, phi, &cfg.weights, &pixels_of(corpus, &val_idx))?;
    let usage = code_usage(&tok, &pixels_of(corpus, &train))?;
    let used = usage.iter().filter(|&&u| u > 0).count();
    let usage_fraction = used as f64 / k as f64;
    if val.pixel > cfg.max_val_pixel {
        return Err(TokenizerError::TrainingFailure(format!(
            "validation pixel error {:.4} above threshold {}",
            val.pixel, cfg.max_val_pixel
        )));
    }
    Ok(TokenizerRun { tokenizer: tok, curve, val, usage, usage_fraction, dead_code_alarm: usage_fraction < 0.25 })
}
