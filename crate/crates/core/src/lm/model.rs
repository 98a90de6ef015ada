use serde::{Deserialize, Serialize};

use super::LmError;
use crate::nn::{add_linear, linear, params_hash};
use crate::seed;
use crate::tensor::{gelu_scalar, softmax_in_place, ParamSet, Tape, Tensor, Var, LN_EPS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub context: usize,
}

impl LmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size, d_model: 64, heads: 4, layers: 2, ff: 256, context: 192 }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let c = self;
        if c.vocab_size == 0 || c.d_model == 0 || c.heads == 0 || c.layers == 0 || c.ff == 0 || c.context == 0 {
            return Err(LmError::Contract(format!("model dimensions must be positive: {c:?}")));
        }
        if c.d_model % c.heads != 0 {
            return Err(LmError::Contract(format!("d_model {} not divisible by {} heads", c.d_model, c.heads)));
        }
        Ok(())
    }
}

pub(crate) const INIT_STD: f64 = 0.02;
const PER_LAYER: usize = 12;

/// Slot offsets within one block.
pub(crate) mod slot {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const QKV: usize = 2;
    pub const OUT: usize = 4;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const FF1: usize = 8;
    pub const FF2: usize = 10;
}

/// Pre-LN decoder-only transformer with learned positions and an untied
/// output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LmModel {
    pub config: LmConfig,
    pub params: ParamSet,
}

impl LmModel {
    /// Weights normal with std 0.02, biases zero, layer-norm gains one.
    pub fn init(config: LmConfig, seed_value: u64) -> Result<Self, LmError> {
        config.validate()?;
        let mut rng = seed::rng_for(seed_value, "lm-init", 0);
        let c = &config;
        let s = Some(INIT_STD);
        let mut p = ParamSet::new();
        p.add("tok_emb", Tensor::randn(&[c.vocab_size, c.d_model], INIT_STD, &mut rng));
        p.add("pos_emb", Tensor::randn(&[c.context, c.d_model], INIT_STD, &mut rng));
        for l in 0..c.layers {
            p.add(format!("block{l}.ln1.g"), Tensor::full(&[c.d_model], 1.0));
            p.add(format!("block{l}.ln1.b"), Tensor::zeros(&[c.d_model]));
            add_linear(&mut p, &format!("block{l}.attn.qkv"), c.d_model, 3 * c.d_model, s, &mut rng);
            add_linear(&mut p, &format!("block{l}.attn.out"), c.d_model, c.d_model, s, &mut rng);
            p.add(format!("block{l}.ln2.g"), Tensor::full(&[c.d_model], 1.0));
            p.add(format!("block{l}.ln2.b"), Tensor::zeros(&[c.d_model]));
            add_linear(&mut p, &format!("block{l}.ff.in"), c.d_model, c.ff, s, &mut rng);
            add_linear(&mut p, &format!("block{l}.ff.out"), c.ff, c.d_model, s, &mut rng);
        }
        p.add("ln_f.g", Tensor::full(&[c.d_model], 1.0));
        p.add("ln_f.b", Tensor::zeros(&[c.d_model]));
        add_linear(&mut p, "head", c.d_model, c.vocab_size, s, &mut rng);
        Ok(Self { config, params: p })
    }

    pub fn hash(&self) -> String {
        params_hash(&self.params)
    }

    pub(crate) fn block_base(&self, layer: usize) -> usize {
        2 + layer * PER_LAYER
    }

    pub(crate) fn final_base(&self) -> usize {
        2 + self.config.layers * PER_LAYER
    }

    /// Slot of the output projection weight.
    pub fn head_slot(&self) -> usize {
        self.final_base() + 2
    }

    fn check_ids(&self, seqs: &[&[usize]]) -> Result<(), LmError> {
        for s in seqs {
            if s.is_empty() {
                return Err(LmError::Contract("empty sequence".into()));
            }
            if s.len() > self.config.context {
                return Err(LmError::Layout(format!("length {} exceeds context {}", s.len(), self.config.context)));
            }
            if let Some(&bad) = s.iter().find(|&&id| id >= self.config.vocab_size) {
                return Err(LmError::Contract(format!("unknown token id {bad} (vocabulary {})", self.config.vocab_size)));
            }
        }
        Ok(())
    }

    /// Logits `[Σ len, V]` for a packed batch; each sequence attends only to
    /// its own prefix.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], seqs: &[&[usize]]) -> Result<Var, LmError> {
        let x = self.trunk(tape, vars, seqs)?;
        self.head(tape, vars, x)
    }

    /// Logits for the packed rows listed in `rows` only, `[rows.len(), V]`.
    pub fn forward_rows(&self, tape: &mut Tape, vars: &[Var], seqs: &[&[usize]], rows: Vec<usize>) -> Result<Var, LmError> {
        let x = self.trunk(tape, vars, seqs)?;
        let x = tape.gather_rows(x, rows)?;
        self.head(tape, vars, x)
    }

    fn head(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, LmError> {
        let f = self.final_base();
        let h = tape.layer_norm(x, vars[f], vars[f + 1])?;
        Ok(linear(tape, vars, f + 2, h)?)
    }

    /// Residual stream after the last block, `[Σ len, d]`.
    fn trunk(&self, tape: &mut Tape, vars: &[Var], seqs: &[&[usize]]) -> Result<Var, LmError> {
        self.check_ids(seqs)?;
        let c = &self.config;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut start = 0;
        for s in seqs {
            segments.push((start, s.len()));
            start += s.len();
        }
        let tok = tape.gather_rows(vars[0], ids)?;
        let pos = tape.gather_rows(vars[1], positions)?;
        let mut x = tape.add(tok, pos)?;
        for l in 0..c.layers {
            let b = self.block_base(l);
            let h = tape.layer_norm(x, vars[b + slot::LN1_G], vars[b + slot::LN1_B])?;
            let qkv = linear(tape, vars, b + slot::QKV, h)?;
            let att = tape.causal_attention(qkv, &segments, c.heads)?;
            let att = linear(tape, vars, b + slot::OUT, att)?;
            x = tape.add(x, att)?;
            let h = tape.layer_norm(x, vars[b + slot::LN2_G], vars[b + slot::LN2_B])?;
            let f = linear(tape, vars, b + slot::FF1, h)?;
            let f = tape.gelu(f);
            let f = linear(tape, vars, b + slot::FF2, f)?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }

    /// Untracked logits `[len, V]` for one sequence.
    pub fn logits(&self, ids: &[usize]) -> Result<Tensor, LmError> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, &[ids])?;
        Ok(tape.value(out).clone())
    }

    fn w(&self, slot: usize) -> &[f64] {
        self.params.get(slot).data()
    }

    /// `out = x·W + b` for the linear layer at `slot`.
    fn affine(&self, slot: usize, x: &[f64], out: &mut Vec<f64>) {
        let (w, b) = (self.w(slot), self.w(slot + 1));
        let n = b.len();
        out.clear();
        out.extend_from_slice(b);
        for (k, &xk) in x.iter().enumerate() {
            if xk != 0.0 {
                for (o, &wk) in out.iter_mut().zip(&w[k * n..(k + 1) * n]) {
                    *o += xk * wk;
                }
            }
        }
    }

    fn layer_norm_row(&self, x: &[f64], g_slot: usize) -> Vec<f64> {
        let (g, b) = (self.w(g_slot), self.w(g_slot + 1));
        let d = x.len() as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * r * g + b).collect()
    }

    /// Appends `id` at the next position and returns its next-token logits.
    pub(crate) fn step(&self, cache: &mut super::KvCache, id: usize) -> Result<Vec<f64>, LmError> {
        let c = &self.config;
        let pos = cache.len;
        if pos >= c.context {
            return Err(LmError::Layout(format!("decoding past context {}", c.context)));
        }
        if id >= c.vocab_size {
            return Err(LmError::Contract(format!("unknown token id {id} (vocabulary {})", c.vocab_size)));
        }
        let d = c.d_model;
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x: Vec<f64> = self.w(0)[id * d..(id + 1) * d].iter().zip(&self.w(1)[pos * d..(pos + 1) * d]).map(|(a, b)| a + b).collect();
        let mut buf = Vec::new();
        for l in 0..c.layers {
            let base = self.block_base(l);
            let h = self.layer_norm_row(&x, base + slot::LN1_G);
            self.affine(base + slot::QKV, &h, &mut buf);
            cache.keys[l].extend_from_slice(&buf[d..2 * d]);
            cache.values[l].extend_from_slice(&buf[2 * d..]);
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; pos + 1];
            for hd in 0..c.heads {
                let q = &buf[hd * dh..(hd + 1) * dh];
                for (t, s) in scores.iter_mut().enumerate() {
                    let k = &keys[t * d + hd * dh..t * d + (hd + 1) * dh];
                    *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut att[hd * dh..(hd + 1) * dh];
                for (t, &p) in scores.iter().enumerate() {
                    let v = &values[t * d + hd * dh..t * d + (hd + 1) * dh];
                    out.iter_mut().zip(v).for_each(|(o, v)| *o += p * v);
                }
            }
            let mut proj = Vec::new();
            self.affine(base + slot::OUT, &att, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            let h = self.layer_norm_row(&x, base + slot::LN2_G);
            self.affine(base + slot::FF1, &h, &mut buf);
            buf.iter_mut().for_each(|v| *v = gelu_scalar(*v));
            self.affine(base + slot::FF2, &buf.clone(), &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        }
        cache.len += 1;
        let f = self.final_base();
        let h = self.layer_norm_row(&x, f);
        let mut logits = Vec::new();
        self.affine(f + 2, &h, &mut logits);
        Ok(logits)
    }
}
