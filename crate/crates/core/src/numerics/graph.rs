//! Define-by-run reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the nodes in reverse recording order. Inputs always precede their
//! outputs, so reverse order is a valid topological order.

use std::collections::HashMap;

use super::tensor::{gemm, gemm_nt, gemm_tn};
use super::{ParamId, Params, Tensor, TensorError};

/// Floor on vector norms in cosine and row normalization.
pub const NORM_EPS: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    Cosine(Var, Var),
    MeanRows(Var),
    Gelu(Var),
    LayerNormRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Stack(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Diag(Var),
    Gather(Var, Vec<usize>),
    CrossEntropyRows(Var, Vec<usize>),
    LogSumExp(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// A recording of forward operations plus their gradients.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::DimensionMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    if t.is_matrix() {
        Ok((t.shape()[0], t.shape()[1]))
    } else {
        Err(TensorError::DimensionMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        })
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph whose parameter leaves do not require gradients. Used for
    /// evaluation passes.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, value: Tensor, op: Op, input: Var) -> Var {
        let rg = self.rg(input);
        self.push(value, op, rg)
    }

    fn binary(&mut self, value: Tensor, op: Op, a: Var, b: Var) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// Leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Each parameter maps to a single
    /// leaf per graph, so every use of it accumulates into one gradient.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Leaf, self.grad_enabled);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Adds every parameter leaf's gradient into the store.
    pub fn accumulate_param_grads(&self, params: &mut Params) {
        for (&id, &v) in &self.param_nodes {
            if let Some(g) = self.grad(v) {
                for (dst, src) in params.grad_mut(id).iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("add", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.binary(out, Op::Add(a, b), a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("sub", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.binary(out, Op::Sub(a, b), a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("mul", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.binary(out, Op::Mul(a, b), a, b))
    }

    /// `x[m×n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (t, r) = (self.value(x), self.value(row));
        if r.shape().len() != 1 || t.cols() != r.numel() {
            return Err(mismatch("add_row", t, r));
        }
        let n = r.numel();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + r.data()[i % n])
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.binary(out, Op::AddRow(x, row), x, row))
    }

    /// `x[m×n] ⊙ row[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (t, r) = (self.value(x), self.value(row));
        if r.shape().len() != 1 || t.cols() != r.numel() {
            return Err(mismatch("mul_row", t, r));
        }
        let n = r.numel();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * r.data()[i % n])
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.binary(out, Op::MulRow(x, row), x, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.unary(out, Op::Scale(a, factor), a)
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", x)?;
        let (k2, n) = require_matrix("matmul", y)?;
        if k != k2 {
            return Err(mismatch("matmul", x, y));
        }
        let out = Tensor::new(vec![m, n], gemm(x.data(), y.data(), m, k, n))?;
        Ok(self.binary(out, Op::MatMul(a, b), a, b))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul_nt", x)?;
        let (n, k2) = require_matrix("matmul_nt", y)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", x, y));
        }
        let out = Tensor::new(vec![m, n], gemm_nt(x.data(), y.data(), m, k, n))?;
        Ok(self.binary(out, Op::MatMulNT(a, b), a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        let (m, n) = require_matrix("transpose", x)?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.unary(out, Op::Transpose(a), a))
    }

    /// Row-wise softmax with max subtraction. Vectors are one row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.unary(out, Op::SoftmaxRows(a), a)
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= NORM_EPS {
                return Err(TensorError::DegenerateVector {
                    op: "normalize_rows",
                    norm,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.unary(out, Op::NormalizeRows(a), a))
    }

    /// Cosine similarity of two equal-length tensors (flattened).
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.numel() != y.numel() {
            return Err(mismatch("cosine", x, y));
        }
        let (na, nb) = (x.l2_norm(), y.l2_norm());
        for norm in [na, nb] {
            if norm <= NORM_EPS {
                return Err(TensorError::DegenerateVector { op: "cosine", norm });
            }
        }
        let dot: f64 = x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum();
        let c = (dot / (na * nb)).clamp(-1.0, 1.0);
        Ok(self.binary(Tensor::scalar(c), Op::Cosine(a, b), a, b))
    }

    /// Column means: `[m×n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut data = vec![0.0; n];
        for row in x.data().chunks(n) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        self.unary(Tensor::vector(data), Op::MeanRows(a), a)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.unary(out, Op::Gelu(a), a)
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.unary(out, Op::LayerNormRows(a), a)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        let (m, n) = require_matrix("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for row in x.data().chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.unary(out, Op::SliceCols(a, start), a))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let m = require_matrix("concat_cols", self.value(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (rows, cols) = require_matrix("concat_cols", t)?;
            if rows != m {
                return Err(mismatch("concat_cols", self.value(*first), t));
            }
            widths.push(cols);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty("concat_rows"))?;
        let n = require_matrix("concat_rows", self.value(*first))?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = require_matrix("concat_rows", t)?;
            if c != n {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Stacks `k` equal-length vectors into `[k×n]`; scalars stack into `[k]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty("stack"))?;
        let n = self.value(*first).numel();
        let mut data = Vec::with_capacity(parts.len() * n);
        for &p in parts {
            let t = self.value(p);
            if t.numel() != n {
                return Err(mismatch("stack", self.value(*first), t));
            }
            data.extend_from_slice(t.data());
        }
        let shape = if n == 1 {
            vec![parts.len()]
        } else {
            vec![parts.len(), n]
        };
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Stack(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.unary(out, Op::Reshape(a), a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(a), a)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        let (m, n) = require_matrix("diag", x)?;
        if m != n {
            return Err(mismatch("diag", x, x));
        }
        let data = (0..n).map(|i| x.data()[i * n + i]).collect();
        Ok(self.unary(Tensor::vector(data), Op::Diag(a), a))
    }

    /// Selects rows of a `[V×d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        let (v, d) = require_matrix("gather_rows", t)?;
        if ids.is_empty() {
            return Err(TensorError::Empty("gather_rows"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.unary(out, Op::Gather(table, ids.to_vec()), table))
    }

    /// Mean over rows of `logsumexp(row) - row[target]`.
    ///
    /// A vector is treated as a single row of logits.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let x = self.value(logits);
        let (m, n) = (x.rows(), x.cols());
        if targets.len() != m {
            return Err(TensorError::DimensionMismatch {
                op: "cross_entropy_rows",
                left: x.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_rows",
                    index: t,
                    len: n,
                });
            }
            let row = x.row(r);
            total += log_sum_exp(row) - row[t];
        }
        let out = Tensor::scalar(total / m as f64);
        Ok(self.unary(out, Op::CrossEntropyRows(logits, targets.to_vec()), logits))
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn log_softmax_nll(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        self.cross_entropy_rows(logits, &[target])
    }

    /// Numerically stable log-sum-exp over all entries.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let v = log_sum_exp(self.value(a).data());
        self.unary(Tensor::scalar(v), Op::LogSumExp(a), a)
    }

    /// Runs reverse accumulation from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (target, contribution) in contributions {
                let node = &mut self.nodes[target.0];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += c;
                        }
                    }
                    None => node.grad = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut res = Vec::new();
        let mut emit = |v: Var, f: &dyn Fn() -> Vec<f64>| {
            if self.rg(v) {
                res.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                emit(*a, &|| g.iter().zip(y.data()).map(|(g, y)| g * y).collect());
                emit(*b, &|| g.iter().zip(x.data()).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(a, row) => {
                let n = self.value(*row).numel();
                emit(*a, &|| g.to_vec());
                emit(*row, &|| {
                    let mut acc = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        acc.iter_mut().zip(chunk).for_each(|(a, c)| *a += c);
                    }
                    acc
                });
            }
            Op::MulRow(a, row) => {
                let (x, r) = (self.value(*a), self.value(*row));
                let n = r.numel();
                emit(*a, &|| {
                    g.iter()
                        .enumerate()
                        .map(|(i, g)| g * r.data()[i % n])
                        .collect()
                });
                emit(*row, &|| {
                    let mut acc = vec![0.0; n];
                    for (i, (g, x)) in g.iter().zip(x.data()).enumerate() {
                        acc[i % n] += g * x;
                    }
                    acc
                });
            }
            Op::Scale(a, f) => emit(*a, &|| g.iter().map(|v| v * f).collect()),
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                emit(*a, &|| gemm_nt(g, y.data(), m, n, k));
                emit(*b, &|| gemm_tn(x.data(), g, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[0]);
                // C = A Bᵀ: dA = dC · B, dB = dCᵀ · A
                emit(*a, &|| gemm(g, y.data(), m, n, k));
                emit(*b, &|| gemm_tn(g, x.data(), m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                emit(*a, &|| {
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j * m + i] = g[i * n + j];
                        }
                    }
                    d
                });
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                emit(*a, &|| {
                    let mut d = vec![0.0; g.len()];
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = y * (g - dot);
                        }
                    }
                    d
                });
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let n = out.cols();
                emit(*a, &|| {
                    let mut d = vec![0.0; g.len()];
                    for (r, dr) in d.chunks_mut(n).enumerate() {
                        let xr = &x.data()[r * n..(r + 1) * n];
                        let yr = &out.data()[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = (g - y * dot) / norm;
                        }
                    }
                    d
                });
            }
            Op::Cosine(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (nx, ny) = (x.l2_norm(), y.l2_norm());
                let c = out.item();
                let gs = g[0];
                emit(*a, &|| {
                    x.data()
                        .iter()
                        .zip(y.data())
                        .map(|(xi, yi)| gs * (yi / (nx * ny) - c * xi / (nx * nx)))
                        .collect()
                });
                emit(*b, &|| {
                    x.data()
                        .iter()
                        .zip(y.data())
                        .map(|(xi, yi)| gs * (xi / (nx * ny) - c * yi / (ny * ny)))
                        .collect()
                });
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let m = x.rows();
                emit(*a, &|| {
                    let mut d = Vec::with_capacity(x.numel());
                    for _ in 0..m {
                        d.extend(g.iter().map(|v| v / m as f64));
                    }
                    d
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                emit(*a, &|| {
                    g.iter()
                        .zip(x.data())
                        .map(|(g, &x)| g * gelu_grad(x))
                        .collect()
                });
            }
            Op::LayerNormRows(a) => {
                let x = self.value(*a);
                let n = out.cols();
                emit(*a, &|| {
                    let mut d = vec![0.0; g.len()];
                    for (r, dr) in d.chunks_mut(n).enumerate() {
                        let xr = &x.data()[r * n..(r + 1) * n];
                        let yr = &out.data()[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mean = xr.iter().sum::<f64>() / n as f64;
                        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let g_mean = gr.iter().sum::<f64>() / n as f64;
                        let gy_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = inv * (g - g_mean - y * gy_mean);
                        }
                    }
                    d
                });
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let n = x.cols();
                let len = out.cols();
                emit(*a, &|| {
                    let mut d = vec![0.0; x.numel()];
                    for (r, gr) in g.chunks(len).enumerate() {
                        d[r * n + start..r * n + start + len].copy_from_slice(gr);
                    }
                    d
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let off = offset;
                    emit(p, &|| {
                        let mut d = Vec::with_capacity(out.rows() * w);
                        for gr in g.chunks(total) {
                            d.extend_from_slice(&gr[off..off + w]);
                        }
                        d
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) | Op::Stack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let off = offset;
                    emit(p, &|| g[off..off + len].to_vec());
                    offset += len;
                }
            }
            Op::Reshape(a) => emit(*a, &|| g.to_vec()),
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                emit(*a, &|| vec![g[0]; n]);
            }
            Op::Diag(a) => {
                let n = out.numel();
                emit(*a, &|| {
                    let mut d = vec![0.0; n * n];
                    for i in 0..n {
                        d[i * n + i] = g[i];
                    }
                    d
                });
            }
            Op::Gather(table, ids) => {
                let t = self.value(*table);
                let d = t.cols();
                emit(*table, &|| {
                    let mut acc = vec![0.0; t.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            acc[id * d + c] += g[r * d + c];
                        }
                    }
                    acc
                });
            }
            Op::CrossEntropyRows(a, targets) => {
                let x = self.value(*a);
                let (m, n) = (x.rows(), x.cols());
                emit(*a, &|| {
                    let mut d = x.data().to_vec();
                    for (r, row) in d.chunks_mut(n).enumerate() {
                        softmax_in_place(row);
                        row[targets[r]] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= g[0] / m as f64);
                    }
                    d
                });
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                emit(*a, &|| {
                    let mut d = x.data().to_vec();
                    softmax_in_place(&mut d);
                    d.iter_mut().for_each(|v| *v *= g[0]);
                    d
                });
            }
        }
        res
    }
}
