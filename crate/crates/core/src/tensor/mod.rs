//! Dense 64-bit tensors with a reverse-mode tape, Adam, and gradient checking.

mod adam;
mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::finite_diff_check;
pub use params::ParamSet;
pub use tape::{PoolMode, Tape, Var};
pub(crate) use tape::{gelu_scalar, softmax_in_place, LN_EPS};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use kernels::{gemm, View, ViewMut};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for extent {bound}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value {value} at coordinate {coordinate}")]
    NonFinite { coordinate: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, EngineError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> EngineError {
    EngineError::Shape { op, detail: detail.into() }
}

/// Row-major n-dimensional array of `f64`.
///
/// A tensor is a plain value; gradient bookkeeping lives on the [`Tape`]
/// node that holds it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain matrix product without gradient tracking.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("[{m}x{k}] · [{k2}x{n}]: inner extents differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            View::row_major(&self.data, m, k),
            View::row_major(&other.data, k, n),
            0.0,
            ViewMut::row_major(&mut out, m, n),
        );
        Ok(Tensor { shape: vec![m, n], data: out })
    }
}

/// Forward differences of an image along columns (`gx`, `H×(W−1)`) and rows
/// (`gy`, `(H−1)×W`). Leading dimensions are treated as a batch.
pub fn image_gradient(img: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.leaf(img.clone());
    let gx = tape.image_grad_x(x)?;
    let gy = tape.image_grad_y(x)?;
    Ok((tape.value(gx).clone(), tape.value(gy).clone()))
}

/// Numerically stable `−log softmax(logits)[target]` for a single logit vector.
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone());
    let loss = tape.softmax_cross_entropy(x, target)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_extent_product() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, EngineError::Shape { .. }));
    }

    #[test]
    fn matmul_examples() {
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);

        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);

        let s = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let t = Tensor::new(vec![1, 1], vec![4.0]).unwrap();
        assert_eq!(s.matmul(&t).unwrap().data(), &[12.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match a.matmul(&b) {
            Err(EngineError::Shape { op, detail }) => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2x3]"), "{detail}");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        assert!((softmax_cross_entropy(&uniform, 0).unwrap() - 3f64.ln()).abs() < 1e-12);

        // ln(e^2 + 2) − 2 = ln(1 + 2e^-2)
        let peaked = Tensor::new(vec![3], vec![2.0, 0.0, 0.0]).unwrap();
        let oracle = (2f64.exp() + 2.0).ln() - 2.0;
        let got = softmax_cross_entropy(&peaked, 0).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.2395447).abs() < 1e-6);

        let sure = Tensor::new(vec![3], vec![100.0, 0.0, 0.0]).unwrap();
        let v = softmax_cross_entropy(&sure, 0).unwrap();
        assert!(v.is_finite() && v < 1e-8);

        assert!(matches!(
            softmax_cross_entropy(&uniform, 3),
            Err(EngineError::Index { index: 3, bound: 3, .. })
        ));
    }

    #[test]
    fn image_gradient_examples() {
        let flat = Tensor::full(&[4, 5], 0.7);
        let (gx, gy) = image_gradient(&flat).unwrap();
        assert_eq!(gx.shape(), &[4, 4]);
        assert_eq!(gy.shape(), &[3, 5]);
        assert!(gx.data().iter().chain(gy.data()).all(|&v| v == 0.0));

        let ramp: Vec<f64> = (0..4).flat_map(|_| (0..5).map(|j| j as f64)).collect();
        let (gx, gy) = image_gradient(&Tensor::new(vec![4, 5], ramp).unwrap()).unwrap();
        assert!(gx.data().iter().all(|&v| v == 1.0));
        assert!(gy.data().iter().all(|&v| v == 0.0));

        // top half 0, bottom half 1: the only non-zero row of gy is row 1 (1 → 2).
        let step: Vec<f64> = (0..4)
            .flat_map(|i| (0..4).map(move |_| if i >= 2 { 1.0 } else { 0.0 }))
            .collect();
        let (_, gy) = image_gradient(&Tensor::new(vec![4, 4], step).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let expected = if i == 1 { 1.0 } else { 0.0 };
                assert_eq!(gy.data()[i * 4 + j], expected);
            }
        }

        assert!(image_gradient(&Tensor::zeros(&[1, 5])).is_err());
        assert!(image_gradient(&Tensor::zeros(&[5, 1])).is_err());
    }
}
