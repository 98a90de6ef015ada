//! Pixel, edge and feature reconstruction loss.

use serde::{Deserialize, Serialize};

use super::phi::FeatureEncoder;
use super::TokenizerError;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_grad: f64,
    pub lambda_feat: f64,
    pub beta_commit: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_grad: 0.5, lambda_feat: 0.1, beta_commit: 0.25 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        for (name, v) in [("lambda_grad", self.lambda_grad), ("lambda_feat", self.lambda_feat), ("beta_commit", self.beta_commit)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TokenizerError::Contract(format!("{name} = {v} must be a finite non-negative number")));
            }
        }
        Ok(())
    }
}

/// Tape handles for the loss and its unweighted parts.
pub struct ReconVars {
    pub total: Var,
    pub pixel: Var,
    pub grad: Var,
    pub feat: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconParts {
    pub total: f64,
    pub pixel: f64,
    pub grad: f64,
    pub feat: f64,
}

impl ReconVars {
    pub fn values(&self, tape: &Tape) -> ReconParts {
        ReconParts {
            total: tape.value(self.total).item(),
            pixel: tape.value(self.pixel).item(),
            grad: tape.value(self.grad).item(),
            feat: tape.value(self.feat).item(),
        }
    }
}

/// `total = pixel + λ_grad·grad + λ_feat·feat` for `[B, H, W]` (or `[H, W]`)
/// images, where
/// - `pixel` is the mean absolute error,
/// - `grad` is the mean squared difference of forward-difference image
///   gradients, pooled over the `H×(W−1)` and `(H−1)×W` valid regions,
/// - `feat` is the mean squared difference of φ features.
///
/// `phi_vars` must be φ's parameters bound as constants on `tape`.
pub fn clinical_recon_loss(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    weights: &LossWeights,
    phi: &FeatureEncoder,
    phi_vars: &[Var],
) -> Result<ReconVars, TokenizerError> {
    weights.validate()?;
    if !phi.frozen {
        return Err(TokenizerError::Contract("φ must be frozen before it scores reconstructions".into()));
    }
    let (sx, sh) = (tape.value(x).shape().to_vec(), tape.value(x_hat).shape().to_vec());
    if sx != sh {
        return Err(TokenizerError::Shape(format!("reconstruction {sh:?} vs target {sx:?}")));
    }
    let diff = tape.sub(x_hat, x)?;
    let abs = tape.abs(diff);
    let pixel = tape.mean(abs)?;

    let gx = tape.image_grad_x(diff)?;
    let gy = tape.image_grad_y(diff)?;
    let n = (tape.value(gx).len() + tape.value(gy).len()) as f64;
    let gx2 = tape.square(gx);
    let gy2 = tape.square(gy);
    let sx2 = tape.sum(gx2);
    let sy2 = tape.sum(gy2);
    let gsum = tape.add(sx2, sy2)?;
    let grad = tape.scale(gsum, 1.0 / n);

    let fx = phi.forward(tape, phi_vars, x)?.features;
    let fh = phi.forward(tape, phi_vars, x_hat)?.features;
    let fd = tape.sub(fh, fx)?;
    let fd2 = tape.square(fd);
    let feat = tape.mean(fd2)?;

    let wg = tape.scale(grad, weights.lambda_grad);
    let wf = tape.scale(feat, weights.lambda_feat);
    let t = tape.add(pixel, wg)?;
    let total = tape.add(t, wf)?;
    Ok(ReconVars { total, pixel, grad, feat })
}

/// Value-only evaluation of [`clinical_recon_loss`].
pub fn recon_parts(x: &Tensor, x_hat: &Tensor, weights: &LossWeights, phi: &FeatureEncoder) -> Result<ReconParts, TokenizerError> {
    let mut tape = Tape::new();
    let vars = phi.params.bind(&mut tape, false);
    let xv = tape.leaf(x.clone());
    let hv = tape.leaf(x_hat.clone());
    Ok(clinical_recon_loss(&mut tape, xv, hv, weights, phi, &vars)?.values(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn frozen_phi() -> FeatureEncoder {
        let mut phi = FeatureEncoder::init(32, 32, 5).unwrap();
        phi.frozen = true;
        phi
    }

    fn random_image(s: u64) -> Tensor {
        let mut rng = seed::rng(s);
        let t = Tensor::randn(&[32, 32], 0.2, &mut rng);
        Tensor::new(vec![32, 32], t.data().iter().map(|v| (v + 0.5).clamp(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        let phi = frozen_phi();
        let x = random_image(1);
        let p = recon_parts(&x, &x, &LossWeights::default(), &phi).unwrap();
        assert_eq!(p, ReconParts::default());
    }

    #[test]
    fn decomposition_and_degenerate_weights() {
        let phi = frozen_phi();
        let (x, y) = (random_image(1), random_image(2));
        let w = LossWeights::default();
        let p = recon_parts(&x, &y, &w, &phi).unwrap();
        assert!(p.pixel > 0.0 && p.grad > 0.0 && p.feat > 0.0);
        assert!((p.total - (p.pixel + w.lambda_grad * p.grad + w.lambda_feat * p.feat)).abs() < 1e-12);
        let zero = LossWeights { lambda_grad: 0.0, lambda_feat: 0.0, ..w };
        let q = recon_parts(&x, &y, &zero, &phi).unwrap();
        assert_eq!(q.total, q.pixel);
    }

    #[test]
    fn blurred_edge_costs_more_than_matched_shift() {
        let phi = frozen_phi();
        let (h, w) = (32, 32);
        let step: Vec<f64> = (0..h * w).map(|i| if i / w >= h / 2 { 0.8 } else { 0.2 }).collect();
        let x = Tensor::new(vec![h, w], step.clone()).unwrap();
        // 3-tap vertical mean.
        let blurred: Vec<f64> = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                let rows = [r.saturating_sub(1), r, (r + 1).min(h - 1)];
                rows.iter().map(|&rr| step[rr * w + c]).sum::<f64>() / 3.0
            })
            .collect();
        let blurred = Tensor::new(vec![h, w], blurred).unwrap();
        let lw = LossWeights::default();
        let pb = recon_parts(&x, &blurred, &lw, &phi).unwrap();
        let shifted = Tensor::new(vec![h, w], step.iter().map(|v| v + pb.pixel).collect()).unwrap();
        let ps = recon_parts(&x, &shifted, &lw, &phi).unwrap();
        assert!((ps.pixel - pb.pixel).abs() < 1e-12);
        assert!(pb.grad > ps.grad);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let phi = frozen_phi();
        let x = random_image(1);
        assert!(recon_parts(&x, &Tensor::zeros(&[32, 31]), &LossWeights::default(), &phi).is_err());
    }
}
