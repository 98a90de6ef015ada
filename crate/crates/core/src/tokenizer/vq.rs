//! Patch-MLP encoder/decoder around a nearest-neighbour codebook.

use serde::{Deserialize, Serialize};

use super::TokenizerError;
use crate::nn::{add_linear, mlp, PatchLayout};
use crate::seed;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerArch {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub hidden: usize,
    /// Latent and code dimension.
    pub dim: usize,
    pub codebook_size: usize,
}

impl Default for TokenizerArch {
    fn default() -> Self {
        Self { height: 32, width: 32, patch: 4, hidden: 64, dim: 16, codebook_size: 128 }
    }
}

impl TokenizerArch {
    pub fn layout(&self) -> PatchLayout {
        PatchLayout { height: self.height, width: self.width, patch: self.patch }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.layout().grid()
    }

    pub fn tokens_per_image(&self) -> usize {
        self.layout().patches_per_image()
    }

    pub fn validate(&self) -> Result<(), TokenizerError> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(TokenizerError::Shape(format!(
                "image {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if self.dim == 0 || self.hidden == 0 || self.codebook_size == 0 {
            return Err(TokenizerError::Contract("tokenizer widths and codebook size must be positive".into()));
        }
        Ok(())
    }
}

/// `h × w` code indices in raster order (row-major, top-left origin).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub indices: Vec<usize>,
    pub image_dims: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub indices: Vec<usize>,
    /// Selected code vectors, `[n, d]`.
    pub codes: Tensor,
    /// Mean of `(sg(z_e) − e)²`.
    pub codebook_term: f64,
    /// Mean of `(z_e − sg(e))²`; equal in value to the codebook term.
    pub commit_term: f64,
}

/// Nearest code by squared Euclidean distance, lowest index on ties.
pub fn nearest_codes(latents: &[f64], codebook: &[f64], dim: usize) -> Result<Vec<usize>, TokenizerError> {
    if codebook.is_empty() || dim == 0 {
        return Err(TokenizerError::Contract("quantize against an empty codebook".into()));
    }
    if latents.len() % dim != 0 || codebook.len() % dim != 0 {
        return Err(TokenizerError::Shape(format!("latent/code width differs from d = {dim}")));
    }
    Ok(latents
        .chunks_exact(dim)
        .map(|z| {
            let mut best = (0, f64::INFINITY);
            for (k, e) in codebook.chunks_exact(dim).enumerate() {
                let d: f64 = z.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect())
}

/// Quantises `[.., d]` latents against a `[K, d]` codebook.
pub fn quantize(latents: &Tensor, codebook: &Tensor) -> Result<Quantized, TokenizerError> {
    let (_, dim) = codebook.dims2("quantize")?;
    if latents.shape().last() != Some(&dim) {
        return Err(TokenizerError::Shape(format!(
            "latent shape {:?} does not end in code dimension {dim}",
            latents.shape()
        )));
    }
    let indices = nearest_codes(latents.data(), codebook.data(), dim)?;
    let mut data = Vec::with_capacity(latents.len());
    for &k in &indices {
        data.extend_from_slice(&codebook.data()[k * dim..(k + 1) * dim]);
    }
    let codes = Tensor::new(latents.shape().to_vec(), data)?;
    let sq = if latents.is_empty() {
        0.0
    } else {
        latents.data().iter().zip(codes.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / latents.len() as f64
    };
    Ok(Quantized { indices, codes, codebook_term: sq, commit_term: sq })
}

/// Encoder, decoder and codebook in one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct VqTokenizer {
    pub arch: TokenizerArch,
    pub params: ParamSet,
}

pub(crate) struct Layers {
    pub encoder: [usize; 4],
    pub decoder: [usize; 4],
    pub codebook: usize,
}

pub(crate) const LAYERS: Layers = Layers { encoder: [0, 2, 4, 6], decoder: [8, 10, 12, 14], codebook: 16 };

impl VqTokenizer {
    pub fn init(arch: TokenizerArch, seed_value: u64) -> Result<Self, TokenizerError> {
        arch.validate()?;
        let mut rng = seed::rng_for(seed_value, "tokenizer-init", 0);
        let (pp, h, d) = (arch.patch * arch.patch, arch.hidden, arch.dim);
        let mut p = ParamSet::new();
        add_linear(&mut p, "enc.embed", pp, h, None, &mut rng);
        add_linear(&mut p, "enc.mix1", h, h, None, &mut rng);
        add_linear(&mut p, "enc.mix2", h, h, None, &mut rng);
        add_linear(&mut p, "enc.out", h, d, None, &mut rng);
        add_linear(&mut p, "dec.embed", d, h, None, &mut rng);
        add_linear(&mut p, "dec.mix1", h, h, None, &mut rng);
        add_linear(&mut p, "dec.mix2", h, h, None, &mut rng);
        add_linear(&mut p, "dec.out", h, pp, None, &mut rng);
        p.add("codebook", Tensor::randn(&[arch.codebook_size, d], 1.0, &mut rng));
        Ok(Self { arch, params: p })
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get(LAYERS.codebook)
    }

    /// `[N, p·p]` patch rows → `[N, d]` latents.
    pub fn encode_tape(&self, tape: &mut Tape, vars: &[Var], patches: Var) -> Result<Var, TokenizerError> {
        Ok(mlp(tape, vars, &LAYERS.encoder, patches)?)
    }

    /// `[N, d]` latents → `[N, p·p]` patch rows squashed into `(0, 1)`.
    pub fn decode_tape(&self, tape: &mut Tape, vars: &[Var], latents: Var) -> Result<Var, TokenizerError> {
        let out = mlp(tape, vars, &LAYERS.decoder, latents)?;
        Ok(tape.sigmoid(out))
    }

    fn image_count(&self, pixels: usize) -> Result<usize, TokenizerError> {
        let hw = self.arch.height * self.arch.width;
        if pixels == 0 || pixels % hw != 0 {
            return Err(TokenizerError::Shape(format!(
                "{pixels} pixels is not a whole number of {}x{} images",
                self.arch.height, self.arch.width
            )));
        }
        Ok(pixels / hw)
    }

    /// Latents for a flat batch of images, `[B·h·w, d]`.
    pub fn encode_batch(&self, images: &[f64]) -> Result<Tensor, TokenizerError> {
        let batch = self.image_count(images.len())?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.leaf(self.arch.layout().patchify(images, batch));
        let z = self.encode_tape(&mut tape, &vars, x)?;
        Ok(tape.value(z).clone())
    }

    /// `H×W` image → `h×w×d` latent grid.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor, TokenizerError> {
        let (h, w) = image.dims2("encode")?;
        if (h, w) != (self.arch.height, self.arch.width) {
            return Err(TokenizerError::Shape(format!(
                "image {h}x{w} does not match tokenizer {}x{}",
                self.arch.height, self.arch.width
            )));
        }
        let (gh, gw) = self.arch.grid();
        Ok(self.encode_batch(image.data())?.reshape(&[gh, gw, self.arch.dim])?)
    }

    /// Decodes `[B·h·w, d]` latents into a flat batch of images.
    pub fn decode_latents_batch(&self, latents: &Tensor) -> Result<Vec<f64>, TokenizerError> {
        let per = self.arch.tokens_per_image();
        let rows = latents.len() / self.arch.dim.max(1);
        if latents.len() != rows * self.arch.dim || rows % per != 0 || rows == 0 {
            return Err(TokenizerError::Shape(format!("cannot decode latents of shape {:?}", latents.shape())));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let z = tape.leaf(latents.reshape(&[rows, self.arch.dim])?);
        let out = self.decode_tape(&mut tape, &vars, z)?;
        Ok(self.arch.layout().unpatchify(tape.value(out).data(), rows / per))
    }

    /// `h×w×d` quantised latents → `H×W` image.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor, TokenizerError> {
        let (gh, gw) = self.arch.grid();
        if latents.shape() != [gh, gw, self.arch.dim] {
            return Err(TokenizerError::Shape(format!(
                "expected latents [{gh}, {gw}, {}], got {:?}",
                self.arch.dim,
                latents.shape()
            )));
        }
        let pixels = self.decode_latents_batch(latents)?;
        Ok(Tensor::new(vec![self.arch.height, self.arch.width], pixels)?)
    }

    fn codes_for(&self, indices: &[usize]) -> Result<Tensor, TokenizerError> {
        let k = self.arch.codebook_size;
        let d = self.arch.dim;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= k {
                return Err(TokenizerError::Contract(format!("code index {i} out of range for K = {k}")));
            }
            data.extend_from_slice(&self.codebook().data()[i * d..(i + 1) * d]);
        }
        Ok(Tensor::new(vec![indices.len(), d], data)?)
    }

    pub fn decode_grid(&self, grid: &TokenGrid) -> Result<Tensor, TokenizerError> {
        let (gh, gw) = self.arch.grid();
        if (grid.rows, grid.cols) != (gh, gw) || grid.indices.len() != gh * gw {
            return Err(TokenizerError::Contract(format!(
                "token grid {}x{} does not match decoder grid {gh}x{gw}",
                grid.rows, grid.cols
            )));
        }
        let codes = self.codes_for(&grid.indices)?;
        Ok(Tensor::new(vec![self.arch.height, self.arch.width], self.decode_latents_batch(&codes)?)?)
    }

    pub fn quantize_image(&self, image: &Tensor) -> Result<(TokenGrid, Quantized), TokenizerError> {
        let latents = self.encode(image)?;
        let q = quantize(&latents, self.codebook())?;
        let (gh, gw) = self.arch.grid();
        let grid = TokenGrid {
            rows: gh,
            cols: gw,
            indices: q.indices.clone(),
            image_dims: (self.arch.height, self.arch.width),
        };
        Ok((grid, q))
    }

    /// Raster-order code ids for one image.
    pub fn tokenize_image(&self, image: &Tensor) -> Result<Vec<usize>, TokenizerError> {
        Ok(self.quantize_image(image)?.0.indices)
    }

    /// Code ids for a flat batch of images, one vector per image.
    pub fn tokenize_batch(&self, images: &[f64]) -> Result<Vec<Vec<usize>>, TokenizerError> {
        let per = self.arch.tokens_per_image();
        let mut out = Vec::new();
        let hw = self.arch.height * self.arch.width;
        for chunk in images.chunks(64 * hw) {
            let z = self.encode_batch(chunk)?;
            let idx = nearest_codes(z.data(), self.codebook().data(), self.arch.dim)?;
            out.extend(idx.chunks(per).map(<[usize]>::to_vec));
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<Tensor, TokenizerError> {
        let (gh, gw) = self.arch.grid();
        if ids.len() != gh * gw {
            return Err(TokenizerError::Contract(format!("expected {} image tokens, got {}", gh * gw, ids.len())));
        }
        self.decode_grid(&TokenGrid { rows: gh, cols: gw, indices: ids.to_vec(), image_dims: (self.arch.height, self.arch.width) })
    }

    /// Decodes many token sequences into a flat batch of images.
    pub fn detokenize_batch(&self, seqs: &[Vec<usize>]) -> Result<Vec<f64>, TokenizerError> {
        let per = self.arch.tokens_per_image();
        if let Some(bad) = seqs.iter().find(|s| s.len() != per) {
            return Err(TokenizerError::Contract(format!("expected {per} image tokens, got {}", bad.len())));
        }
        let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
        if flat.is_empty() {
            return Ok(Vec::new());
        }
        self.decode_latents_batch(&self.codes_for(&flat)?)
    }
}
