//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape; node ids are therefore a
//! topological order and `backward` is a single reverse sweep. Gradients
//! are only materialised for nodes that depend on a tracked leaf.

use super::kernels::{gemm, View, ViewMut};
use super::{shape_err, EngineError, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Square,
    Abs,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Shift { x: Var },
    AddRow { x: Var, bias: Var },
    Unary { x: Var, f: Unary },
    Gelu { x: Var, deriv: Vec<f64> },
    Sum { x: Var },
    Mean { x: Var },
    Reshape { x: Var },
    StraightThrough { x: Var },
    Gather { x: Var, index: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    ConcatCols { parts: Vec<(Var, usize)> },
    Pool { x: Var, size: usize, argmax: Option<Vec<usize>> },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { qkv: Var, segments: Vec<(usize, usize)>, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, rows: Vec<(usize, usize, f64)>, probs: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    ImageGradX { x: Var, w: usize },
    ImageGradY { x: Var, h: usize, w: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    tracked: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// A single-use computation record. Build the forward pass through the
/// methods below, then call [`Tape::backward`] on a scalar result.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

// libm tanh is about 3x slower than this, and GELU dominates MLP cost.
// Saturates correctly: exp overflow gives 1, underflow gives -1.
fn fast_tanh(z: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    gelu_and_grad(x).0
}

/// GELU value and derivative at `x`.
fn gelu_and_grad(x: f64) -> (f64, f64) {
    let t = fast_tanh(GELU_C * (x + 0.044715 * x * x * x));
    let y = 0.5 * x * (1.0 + t);
    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, d)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, tracked, op, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Untracked constant.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked leaf: receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `v`'s value as an untracked constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    /// Accumulated gradient of a tracked leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Gradient as a tensor shaped like the value; zeros when never reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = self.node(v);
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("gradient length matches value"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn tracked2(&self, a: Var, b: Var) -> bool {
        self.node(a).tracked || self.node(b).tracked
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let tracked = self.tracked2(a, b);
        Ok(self.push(value, Op::Matmul { a, b }, tracked))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        let tracked = self.tracked2(a, b);
        Ok(self.push(value, Op::Add { a, b }, tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        let tracked = self.tracked2(a, b);
        Ok(self.push(value, Op::Sub { a, b }, tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        let tracked = self.tracked2(a, b);
        Ok(self.push(value, Op::Mul { a, b }, tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        let tracked = self.is_tracked(x);
        self.push(value, Op::Scale { x, c }, tracked)
    }

    /// `x + c` elementwise.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v + c).collect())
            .expect("same shape");
        let tracked = self.is_tracked(x);
        self.push(value, Op::Shift { x }, tracked)
    }

    /// Adds a length-`C` vector to every row of an `N×C` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2("add_row")?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(shape_err("add_row", format!("bias of {} for {c} columns", b.len())));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c.max(1)).take(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let value = Tensor::new(vec![n, c], data)?;
        let tracked = self.tracked2(x, bias);
        Ok(self.push(value, Op::AddRow { x, bias }, tracked))
    }

    fn unary(&mut self, x: Var, f: Unary) -> Var {
        let src = self.value(x);
        let map: fn(f64) -> f64 = match f {
            Unary::Relu => |v| v.max(0.0),
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Square => |v| v * v,
            Unary::Abs => f64::abs,
            Unary::Exp => f64::exp,
        };
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| map(v)).collect())
            .expect("same shape");
        let tracked = self.is_tracked(x);
        self.push(value, Op::Unary { x, f }, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (out, mut deriv): (Vec<f64>, Vec<f64>) = src.data().iter().map(|&v| gelu_and_grad(v)).unzip();
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let tracked = self.is_tracked(x);
        if !tracked {
            deriv = Vec::new();
        }
        self.push(value, Op::Gelu { x, deriv }, tracked)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.is_tracked(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, tracked)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.is_empty() {
            return Err(EngineError::Contract("mean of an empty tensor".into()));
        }
        let m = src.data().iter().sum::<f64>() / src.len() as f64;
        let tracked = self.is_tracked(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean { x }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::Reshape { x }, tracked))
    }

    /// Forward value `value`, identity gradient to `x` (straight-through
    /// estimator for non-differentiable substitutions).
    pub fn straight_through(&mut self, x: Var, value: Tensor) -> Result<Var> {
        if value.shape() != self.value(x).shape() {
            return Err(shape_err("straight_through", format!("{:?} vs {:?}", value.shape(), self.value(x).shape())));
        }
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::StraightThrough { x }, tracked))
    }

    /// `out[i] = x[index[i]]` over flat storage, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(EngineError::Index { op: "gather", index: bad, bound: src.len() });
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::Gather { x, index }, tracked))
    }

    /// Selects rows of an `R×C` matrix (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (r, c) = self.value(x).dims2("gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(EngineError::Index { op: "gather_rows", index: bad, bound: r });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], data)?;
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::GatherRows { x, rows }, tracked))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.value(p).dims2("concat_cols")?);
        }
        let n = dims.first().map_or(0, |d| d.0);
        if dims.iter().any(|d| d.0 != n) {
            return Err(shape_err("concat_cols", format!("row counts {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &(_, c)) in parts.iter().zip(&dims) {
            let src = self.value(p).data();
            for i in 0..n {
                data[i * total + offset..i * total + offset + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let value = Tensor::new(vec![n, total], data)?;
        let tracked = parts.iter().any(|&p| self.is_tracked(p));
        let parts = parts.iter().copied().zip(dims.iter().map(|d| d.1)).collect();
        Ok(self.push(value, Op::ConcatCols { parts }, tracked))
    }

    /// Reduces consecutive groups of `size` rows of an `N×C` matrix.
    pub fn pool_rows(&mut self, x: Var, size: usize, mode: PoolMode) -> Result<Var> {
        let (n, c) = self.value(x).dims2("pool_rows")?;
        if size == 0 || n % size != 0 {
            return Err(shape_err("pool_rows", format!("{n} rows not divisible into groups of {size}")));
        }
        let groups = n / size;
        let src = self.value(x).data();
        let mut data = vec![0.0; groups * c];
        let mut argmax = (mode == PoolMode::Max).then(|| vec![0usize; groups * c]);
        for g in 0..groups {
            for j in 0..c {
                let out = &mut data[g * c + j];
                match &mut argmax {
                    None => {
                        *out = (0..size).map(|r| src[(g * size + r) * c + j]).sum::<f64>() / size as f64;
                    }
                    Some(am) => {
                        let mut best = g * size;
                        for r in g * size..(g + 1) * size {
                            if src[r * c + j] > src[best * c + j] {
                                best = r;
                            }
                        }
                        *out = src[best * c + j];
                        am[g * c + j] = best;
                    }
                }
            }
        }
        let value = Tensor::new(vec![groups, c], data)?;
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::Pool { x, size, argmax }, tracked))
    }

    /// Row-wise softmax of an `N×C` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2("softmax_rows")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c.max(1)).take(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(vec![n, c], data)?;
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::SoftmaxRows { x }, tracked))
    }

    /// Per-row layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("layer_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err("layer_norm", format!("gain/bias must have {d} entries")));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let tracked = self.is_tracked(x) || self.is_tracked(gamma) || self.is_tracked(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, tracked))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `N×3d` (queries, keys, values side by side); `segments` lists
    /// `(start_row, len)` for each independent sequence. Returns `N×d`.
    pub fn causal_attention(&mut self, qkv: Var, segments: &[(usize, usize)], heads: usize) -> Result<Var> {
        let (n, d3) = self.value(qkv).dims2("causal_attention")?;
        if d3 % 3 != 0 || heads == 0 || (d3 / 3) % heads != 0 {
            return Err(shape_err("causal_attention", format!("width {d3} with {heads} heads")));
        }
        let mut covered = 0;
        for &(start, len) in segments {
            if start != covered {
                return Err(shape_err("causal_attention", "segments must tile the rows in order"));
            }
            covered += len;
        }
        if covered != n {
            return Err(shape_err("causal_attention", format!("segments cover {covered} of {n} rows")));
        }
        let d = d3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![0.0; n * d];
        let prob_len: usize = segments.iter().map(|&(_, t)| t * t).sum::<usize>() * heads;
        let mut probs = vec![0.0; prob_len];
        let mut poff = 0;
        for &(start, t) in segments {
            for h in 0..heads {
                let p = &mut probs[poff..poff + t * t];
                let q = View { data: src, offset: start * d3 + h * dh, rows: t, cols: dh, row_stride: d3, col_stride: 1 };
                let k = View { offset: start * d3 + d + h * dh, ..q };
                let v = View { offset: start * d3 + 2 * d + h * dh, ..q };
                gemm(q, k.t(), 0.0, ViewMut::row_major(p, t, t));
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    for s in row[..=i].iter_mut() {
                        *s *= scale;
                    }
                    softmax_in_place(&mut row[..=i]);
                    for s in row[i + 1..].iter_mut() {
                        *s = 0.0;
                    }
                }
                let o = ViewMut { data: &mut out, offset: start * d + h * dh, rows: t, cols: dh, row_stride: d, col_stride: 1 };
                gemm(View::row_major(p, t, t), v, 0.0, o);
                poff += t * t;
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let tracked = self.is_tracked(qkv);
        let segments = segments.to_vec();
        Ok(self.push(value, Op::Attention { qkv, segments, heads, probs }, tracked))
    }

    /// Weighted mean of row-wise `−log softmax(logits)[target]`.
    ///
    /// Rows with zero weight are skipped entirely. The total weight must be
    /// positive.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(shape_err("cross_entropy", format!("{n} rows, {} targets, {} weights", targets.len(), weights.len())));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(EngineError::Contract("cross_entropy: no rows carry weight".into()));
        }
        let src = self.value(logits).data();
        let mut rows = Vec::new();
        let mut probs = Vec::new();
        let mut loss = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let t = targets[i];
            if t >= c {
                return Err(EngineError::Index { op: "cross_entropy", index: t, bound: c });
            }
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += weights[i] * (lse - row[t]);
            rows.push((i, t, weights[i] / total));
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let tracked = self.is_tracked(logits);
        Ok(self.push(Tensor::scalar(loss / total), Op::CrossEntropy { logits, rows, probs }, tracked))
    }

    /// `−log softmax(logits)[target]` for a single logit vector of any shape.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let v = self.value(logits).len();
        if target >= v {
            return Err(EngineError::Index { op: "softmax_cross_entropy", index: target, bound: v });
        }
        let row = self.reshape(logits, &[1, v])?;
        self.cross_entropy(row, &[target], &[1.0])
    }

    /// Mean binary cross-entropy between sigmoid(logits) and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let src = self.value(logits).data();
        if src.len() != targets.len() || src.is_empty() {
            return Err(shape_err("bce_with_logits", format!("{} logits, {} targets", src.len(), targets.len())));
        }
        let loss = src
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / src.len() as f64;
        let tracked = self.is_tracked(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, targets: targets.to_vec() }, tracked))
    }

    fn image_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let shape = self.value(x).shape();
        if shape.len() < 2 {
            return Err(shape_err(op, format!("need at least 2 dims, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h < 2 || w < 2 {
            return Err(shape_err(op, format!("image extents {h}x{w} must both be >= 2")));
        }
        Ok((self.value(x).len() / (h * w), h, w))
    }

    /// `gx[.., i, j] = x[.., i, j+1] − x[.., i, j]`.
    pub fn image_grad_x(&mut self, x: Var) -> Result<Var> {
        let (b, h, w) = self.image_dims("image_grad_x", x)?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * h * (w - 1));
        for row in src.chunks_exact(w) {
            data.extend(row.windows(2).map(|p| p[1] - p[0]));
        }
        let mut shape = self.value(x).shape().to_vec();
        *shape.last_mut().unwrap() = w - 1;
        let value = Tensor::new(shape, data)?;
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::ImageGradX { x, w }, tracked))
    }

    /// `gy[.., i, j] = x[.., i+1, j] − x[.., i, j]`.
    pub fn image_grad_y(&mut self, x: Var) -> Result<Var> {
        let (b, h, w) = self.image_dims("image_grad_y", x)?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * (h - 1) * w);
        for img in src.chunks_exact(h * w) {
            for i in 0..h - 1 {
                data.extend((0..w).map(|j| img[(i + 1) * w + j] - img[i * w + j]));
            }
        }
        let mut shape = self.value(x).shape().to_vec();
        let rank = shape.len();
        shape[rank - 2] = h - 1;
        let value = Tensor::new(shape, data)?;
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::ImageGradY { x, h, w }, tracked))
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.node(loss);
        if !root.value.is_scalar() {
            return Err(EngineError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.tracked {
            return Err(EngineError::Contract("backward on an untracked value".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[id];
            if !matches!(node.op, Op::Leaf) || !node.tracked {
                continue;
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(EngineError::NonFinite { coordinate: pos, value: g[pos] });
            }
            match &mut node.grad {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if tracked(*a) {
                    let ga = accumulate(grads, a.0, m * k);
                    gemm(
                        View::row_major(g, m, n),
                        View::transposed(val(*b).data(), k, n),
                        1.0,
                        ViewMut::row_major(ga, m, k),
                    );
                }
                if tracked(*b) {
                    let gb = accumulate(grads, b.0, k * n);
                    gemm(
                        View::transposed(val(*a).data(), m, k),
                        View::row_major(g, m, n),
                        1.0,
                        ViewMut::row_major(gb, k, n),
                    );
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if tracked(*a) {
                    let ga = accumulate(grads, a.0, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, v)| *x += v);
                }
                if tracked(*b) {
                    let gb = accumulate(grads, b.0, g.len());
                    gb.iter_mut().zip(g).for_each(|(x, v)| *x += sign * v);
                }
            }
            Op::Mul { a, b } => {
                if tracked(*a) {
                    let other = val(*b).data();
                    let ga = accumulate(grads, a.0, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * other[i];
                    }
                }
                if tracked(*b) {
                    let other = val(*a).data();
                    let gb = accumulate(grads, b.0, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * other[i];
                    }
                }
            }
            Op::Scale { x, c } => {
                let gx = accumulate(grads, x.0, g.len());
                gx.iter_mut().zip(g).for_each(|(a, v)| *a += c * v);
            }
            Op::Shift { x } | Op::Reshape { x } | Op::StraightThrough { x } => {
                let gx = accumulate(grads, x.0, g.len());
                gx.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
            Op::AddRow { x, bias } => {
                let c = val(*bias).len();
                if tracked(*x) {
                    let gx = accumulate(grads, x.0, g.len());
                    gx.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
                if tracked(*bias) {
                    let gb = accumulate(grads, bias.0, c);
                    for row in g.chunks_exact(c.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Unary { x, f } => {
                let input = val(*x).data();
                let output = node.value.data();
                let gx = accumulate(grads, x.0, g.len());
                let mut apply = |d: &dyn Fn(usize) -> f64| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * d(i);
                    }
                };
                match f {
                    Unary::Relu => apply(&|i| if input[i] > 0.0 { 1.0 } else { 0.0 }),
                    Unary::Tanh => apply(&|i| 1.0 - output[i] * output[i]),
                    Unary::Sigmoid => apply(&|i| output[i] * (1.0 - output[i])),
                    Unary::Square => apply(&|i| 2.0 * input[i]),
                    Unary::Abs => apply(&|i| {
                        if input[i] > 0.0 {
                            1.0
                        } else if input[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }),
                    Unary::Exp => apply(&|i| output[i]),
                }
            }
            Op::Gelu { x, deriv } => {
                let gx = accumulate(grads, x.0, g.len());
                for ((a, &gi), &d) in gx.iter_mut().zip(g).zip(deriv) {
                    *a += gi * d;
                }
            }
            Op::Sum { x } => {
                let n = val(*x).len();
                let gx = accumulate(grads, x.0, n);
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Mean { x } => {
                let n = val(*x).len();
                let gx = accumulate(grads, x.0, n);
                let share = g[0] / n as f64;
                gx.iter_mut().for_each(|a| *a += share);
            }
            Op::Gather { x, index } => {
                let gx = accumulate(grads, x.0, val(*x).len());
                for (o, &i) in index.iter().enumerate() {
                    gx[i] += g[o];
                }
            }
            Op::GatherRows { x, rows } => {
                let c = val(*x).shape()[1];
                let gx = accumulate(grads, x.0, val(*x).len());
                for (o, &r) in rows.iter().enumerate() {
                    let dst = &mut gx[r * c..(r + 1) * c];
                    dst.iter_mut().zip(&g[o * c..(o + 1) * c]).for_each(|(a, v)| *a += v);
                }
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let n = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for &(p, c) in parts {
                    if tracked(p) {
                        let gp = accumulate(grads, p.0, n * c);
                        for i in 0..n {
                            let src = &g[i * total + offset..i * total + offset + c];
                            gp[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(a, v)| *a += v);
                        }
                    }
                    offset += c;
                }
            }
            Op::Pool { x, size, argmax } => {
                let c = node.value.shape()[1];
                let groups = node.value.shape()[0];
                let gx = accumulate(grads, x.0, val(*x).len());
                match argmax {
                    Some(am) => {
                        for o in 0..groups * c {
                            gx[am[o] * c + o % c] += g[o];
                        }
                    }
                    None => {
                        let share = 1.0 / *size as f64;
                        for grp in 0..groups {
                            for r in grp * size..(grp + 1) * size {
                                for j in 0..c {
                                    gx[r * c + j] += g[grp * c + j] * share;
                                }
                            }
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                let gx = accumulate(grads, x.0, g.len());
                for (i, (yr, gr)) in y.chunks_exact(c.max(1)).zip(g.chunks_exact(c.max(1))).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = val(*gamma).len();
                let n = rstd.len();
                let gam = val(*gamma).data();
                if tracked(*gamma) {
                    let gg = accumulate(grads, gamma.0, d);
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if tracked(*beta) {
                    let gb = accumulate(grads, beta.0, d);
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                }
                if tracked(*x) {
                    let gx = accumulate(grads, x.0, n * d);
                    let inv_d = 1.0 / d as f64;
                    for i in 0..n {
                        let mut sum = 0.0;
                        let mut sum_h = 0.0;
                        for j in 0..d {
                            let dh = g[i * d + j] * gam[j];
                            sum += dh;
                            sum_h += dh * xhat[i * d + j];
                        }
                        for j in 0..d {
                            let dh = g[i * d + j] * gam[j];
                            gx[i * d + j] += rstd[i] * (dh - inv_d * sum - xhat[i * d + j] * inv_d * sum_h);
                        }
                    }
                }
            }
            Op::Attention { qkv, segments, heads, probs } => {
                let src = val(*qkv).data();
                let d3 = val(*qkv).shape()[1];
                let d = d3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let gq = accumulate(grads, qkv.0, src.len());
                let mut poff = 0;
                let mut dp = Vec::new();
                for &(start, t) in segments {
                    dp.resize(t * t, 0.0);
                    for h in 0..*heads {
                        let p = &probs[poff..poff + t * t];
                        let go = View { data: g, offset: start * d + h * dh, rows: t, cols: dh, row_stride: d, col_stride: 1 };
                        let q = View { data: src, offset: start * d3 + h * dh, rows: t, cols: dh, row_stride: d3, col_stride: 1 };
                        let k = View { offset: start * d3 + d + h * dh, ..q };
                        let v = View { offset: start * d3 + 2 * d + h * dh, ..q };
                        // dV += Pᵀ dO
                        gemm(
                            View::row_major(p, t, t).t(),
                            go,
                            1.0,
                            ViewMut { data: &mut *gq, offset: start * d3 + 2 * d + h * dh, rows: t, cols: dh, row_stride: d3, col_stride: 1 },
                        );
                        // dP = dO Vᵀ, then dS = P ⊙ (dP − rowsum(P ⊙ dP)) · scale
                        gemm(go, v.t(), 0.0, ViewMut::row_major(&mut dp, t, t));
                        for i in 0..t {
                            let pr = &p[i * t..(i + 1) * t];
                            let dr = &mut dp[i * t..(i + 1) * t];
                            let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                            for j in 0..t {
                                dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { 0.0 };
                            }
                        }
                        // dQ += dS K ; dK += dSᵀ Q
                        gemm(
                            View::row_major(&dp, t, t),
                            k,
                            1.0,
                            ViewMut { data: &mut *gq, offset: start * d3 + h * dh, rows: t, cols: dh, row_stride: d3, col_stride: 1 },
                        );
                        gemm(
                            View::row_major(&dp, t, t).t(),
                            q,
                            1.0,
                            ViewMut { data: &mut *gq, offset: start * d3 + d + h * dh, rows: t, cols: dh, row_stride: d3, col_stride: 1 },
                        );
                        poff += t * t;
                    }
                }
            }
            Op::CrossEntropy { logits, rows, probs } => {
                let c = val(*logits).shape()[1];
                let gx = accumulate(grads, logits.0, val(*logits).len());
                for (r, &(i, t, w)) in rows.iter().enumerate() {
                    let p = &probs[r * c..(r + 1) * c];
                    let dst = &mut gx[i * c..(i + 1) * c];
                    for j in 0..c {
                        dst[j] += g[0] * w * p[j];
                    }
                    dst[t] -= g[0] * w;
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let src = val(*logits).data();
                let n = src.len() as f64;
                let gx = accumulate(grads, logits.0, src.len());
                for i in 0..src.len() {
                    gx[i] += g[0] * (sigmoid(src[i]) - targets[i]) / n;
                }
            }
            Op::ImageGradX { x, w } => {
                let gx = accumulate(grads, x.0, val(*x).len());
                let wo = w - 1;
                for (r, grow) in g.chunks_exact(wo).enumerate() {
                    for (j, &v) in grow.iter().enumerate() {
                        gx[r * w + j + 1] += v;
                        gx[r * w + j] -= v;
                    }
                }
            }
            Op::ImageGradY { x, h, w } => {
                let gx = accumulate(grads, x.0, val(*x).len());
                let per_out = (h - 1) * w;
                for (b, gimg) in g.chunks_exact(per_out).enumerate() {
                    let base = b * h * w;
                    for i in 0..h - 1 {
                        for j in 0..*w {
                            let v = gimg[i * w + j];
                            gx[base + (i + 1) * w + j] += v;
                            gx[base + i * w + j] -= v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
