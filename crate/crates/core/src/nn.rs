//! Small layer helpers shared by the tokenizer, φ and the language model.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::tensor::{ParamSet, Result, Tape, Tensor, Var};

/// Registers `{name}.w` (`fan_in × fan_out`, normal with `std`, or
/// `1/sqrt(fan_in)` when `std` is `None`) and a zero `{name}.b`. Returns the
/// weight slot; the bias is the next slot.
pub fn add_linear<R: Rng>(
    params: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: Option<f64>,
    rng: &mut R,
) -> usize {
    let std = std.unwrap_or(1.0 / (fan_in as f64).sqrt());
    let w = params.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    params.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    w
}

/// `x·W + b` for the weight bound at `vars[slot]` and the bias after it.
pub fn linear(tape: &mut Tape, vars: &[Var], slot: usize, x: Var) -> Result<Var> {
    let h = tape.matmul(x, vars[slot])?;
    tape.add_row(h, vars[slot + 1])
}

/// Stack of linear layers with GELU between them (none after the last).
pub fn mlp(tape: &mut Tape, vars: &[Var], slots: &[usize], mut x: Var) -> Result<Var> {
    for (i, &slot) in slots.iter().enumerate() {
        x = linear(tape, vars, slot, x)?;
        if i + 1 < slots.len() {
            x = tape.gelu(x);
        }
    }
    Ok(x)
}

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn params_hash(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        h.update([0u8]);
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Row-major `[B, H, W]` ↔ patch-row `[B·gh·gw, p·p]` index maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchLayout {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn patches_per_image(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// For each patch-row element, its flat index in the image batch.
    pub fn patchify_index(&self, batch: usize) -> Vec<usize> {
        let (gh, gw) = self.grid();
        let (p, h, w) = (self.patch, self.height, self.width);
        let mut out = Vec::with_capacity(batch * h * w);
        for b in 0..batch {
            for pi in 0..gh {
                for pj in 0..gw {
                    for a in 0..p {
                        for c in 0..p {
                            out.push(b * h * w + (pi * p + a) * w + pj * p + c);
                        }
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`PatchLayout::patchify_index`].
    pub fn unpatchify_index(&self, batch: usize) -> Vec<usize> {
        let fwd = self.patchify_index(batch);
        let mut inv = vec![0; fwd.len()];
        for (patch_pos, &img_pos) in fwd.iter().enumerate() {
            inv[img_pos] = patch_pos;
        }
        inv
    }

    pub fn patchify(&self, images: &[f64], batch: usize) -> Tensor {
        let data = self.patchify_index(batch).iter().map(|&i| images[i]).collect();
        Tensor::new(vec![batch * self.patches_per_image(), self.patch * self.patch], data).expect("patch dims")
    }

    pub fn unpatchify(&self, rows: &[f64], batch: usize) -> Vec<f64> {
        self.unpatchify_index(batch).iter().map(|&i| rows[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_maps_are_inverse() {
        let layout = PatchLayout { height: 8, width: 12, patch: 4 };
        let imgs: Vec<f64> = (0..2 * 96).map(|i| i as f64).collect();
        let rows = layout.patchify(&imgs, 2);
        assert_eq!(rows.shape(), &[12, 16]);
        assert_eq!(&rows.data()[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(rows.data()[4], 12.0);
        assert_eq!(layout.unpatchify(rows.data(), 2), imgs);
    }
}
