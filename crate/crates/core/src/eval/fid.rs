//! Fréchet distance between Gaussian fits of feature clouds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub const SHRINKAGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudSource {
    Real,
    Generated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCloud {
    /// `n` row vectors of equal dimension.
    pub features: Vec<Vec<f64>>,
    pub source: CloudSource,
    pub phi_hash: String,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FidError {
    #[error("feature extractors differ ({0} vs {1}); clouds are not comparable")]
    HashMismatch(String, String),
    #[error("feature clouds need at least 2 points of equal dimension: {0}")]
    Shape(String),
}

fn fit(cloud: &FeatureCloud) -> Result<(DVector<f64>, DMatrix<f64>), FidError> {
    let n = cloud.features.len();
    let dim = cloud.features.first().map_or(0, Vec::len);
    if n < 2 || dim == 0 || cloud.features.iter().any(|f| f.len() != dim) {
        return Err(FidError::Shape(format!("{n} points, first of dim {dim}")));
    }
    let x = DMatrix::from_fn(n, dim, |i, j| cloud.features[i][j]);
    let mean = DVector::from_fn(dim, |j, _| x.column(j).sum() / n as f64);
    let mut centred = x;
    for j in 0..dim {
        let m = mean[j];
        centred.column_mut(j).iter_mut().for_each(|v| *v -= m);
    }
    let mut cov = centred.transpose() * &centred / (n as f64 - 1.0);
    for j in 0..dim {
        cov[(j, j)] += SHRINKAGE;
    }
    Ok((mean, cov))
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`, with `1e-6·I` added to
/// each covariance.
///
/// The trace of the product square root is evaluated as the sum of square
/// roots of the eigenvalues of the symmetric matrix `Σa^{1/2} Σb Σa^{1/2}`,
/// which shares its spectrum with `Σa Σb`. Negative round-off eigenvalues
/// are clamped to zero and the result is clamped at zero.
pub fn frechet_distance(a: &FeatureCloud, b: &FeatureCloud) -> Result<f64, FidError> {
    if a.phi_hash != b.phi_hash {
        return Err(FidError::HashMismatch(a.phi_hash.clone(), b.phi_hash.clone()));
    }
    let (mu_a, cov_a) = fit(a)?;
    let (mu_b, cov_b) = fit(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(FidError::Shape(format!("dims {} vs {}", mu_a.len(), mu_b.len())));
    }
    let eig_a = SymmetricEigen::new(sym(&cov_a));
    let root = eig_a.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sqrt_a = &eig_a.eigenvectors * DMatrix::from_diagonal(&root) * eig_a.eigenvectors.transpose();
    let inner = sym(&(&sqrt_a * &cov_b * &sqrt_a));
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    let d = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}
