//! Dense f64 linear algebra and reverse-mode autodiff.
//!
//! Everything trainable in this crate runs through two pieces:
//!
//! * [`Matrix`] — an immutable-by-convention, row-major, finite-valued f64
//!   matrix. Constructors reject NaN/Inf so downstream code never has to.
//! * [`ComputationTape`] — a define-by-run arena of recorded primitive ops.
//!   A forward pass appends nodes; [`ComputationTape::backward`] sweeps the
//!   arena once in reverse insertion order and accumulates vector-Jacobian
//!   products into every tracked parameter.
//!
//! The free functions ([`matmul`], [`affine`], [`gelu`], [`softmax_rows`],
//! [`cross_entropy`], [`cosine_similarity`]) are the forward kernels; the tape
//! methods call the same kernels, so taped and untaped execution are
//! bit-identical.

use crate::error::{Error, Result};

/// Lower clamp for shifted logits before exponentiation inside softmax.
///
/// After max-subtraction every shifted logit is <= 0; exp underflows to 0.0
/// below roughly -745, which would violate the strictly-positive-output
/// contract. Clamping at -708 (exp(-708) ~ 3e-308, still normal) keeps every
/// probability positive for per-row logit spreads up to ~2000 while being
/// bit-identical to the naive computation for spreads under 708.
const SOFTMAX_EXP_FLOOR: f64 = -708.0;

/// Dense row-major matrix of finite f64 values.
///
/// `rows == 0` is permitted (an empty batch is a legal input to every
/// forward operation); `cols` must be positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major values, rejecting shape/finiteness violations.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::Contract(format!(
                "matrix must have positive cols, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix value count {} does not match shape {rows}x{cols}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "Matrix::new" });
        }
        Ok(Matrix { rows, cols, values })
    }

    /// All-zeros matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(cols > 0, "matrix must have positive cols");
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    /// Builds from nested rows; all rows must share one positive length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.is_empty() {
            return Err(Error::Contract(
                "from_rows needs at least one row; use zeros/new for empty batches".into(),
            ));
        }
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("from_rows: ragged rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    /// Internal constructor for values already known finite.
    /// Still verifies in debug builds.
    pub(crate) fn raw(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Matrix { rows, cols, values }
    }

    /// Validates that every entry is finite, naming `op` on failure.
    fn checked(self, op: &'static str) -> Result<Self> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major backing slice.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.rows && c < self.cols, "index out of range");
        self.values[r * self.cols + c]
    }

    /// Borrow of row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        assert!(r < self.rows, "row out of range");
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy out as a nested row array (the interchange shape used by the
    /// JSON artifacts and the Python bindings).
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.values.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        Matrix::raw(self.cols, self.rows, out)
    }

    /// Elementwise map; the result is finiteness-checked.
    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        Matrix::raw_unchecked(self.rows, self.cols, self.values.iter().map(|&v| f(v)).collect())
            .checked(op)
    }

    /// Like `raw` but without the debug finiteness assertion, for use by
    /// `map`/`checked` pipelines that validate explicitly.
    fn raw_unchecked(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        Matrix { rows, cols, values }
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "add", |a, b| a + b)
    }

    /// Elementwise product; shapes must match.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    fn zip(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape {
                op,
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Matrix::raw_unchecked(self.rows, self.cols, values).checked(op)
    }

    /// Scalar multiple.
    pub fn scale(&self, factor: f64) -> Result<Matrix> {
        if !factor.is_finite() {
            return Err(Error::Contract(format!("scale factor {factor} is not finite")));
        }
        self.map("scale", |v| v * factor)
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
    }
}

/// Standard matrix product `A (m x k) * B (k x n) -> m x n`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.values[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.values[p * n..(p + 1) * n];
            for (o, &b_pj) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    Matrix::raw_unchecked(m, n, out).checked("matmul")
}

/// Affine layer `x (b x d_in) * W^T (d_in x d_out) + bias (1 x d_out)`,
/// the building block of the two-layer MLP.
pub fn affine(x: &Matrix, w: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if w.cols != x.cols {
        return Err(Error::Shape {
            op: "affine",
            left_rows: x.rows,
            left_cols: x.cols,
            right_rows: w.rows,
            right_cols: w.cols,
        });
    }
    if bias.rows != 1 || bias.cols != w.rows {
        return Err(Error::Shape {
            op: "affine-bias",
            left_rows: w.rows,
            left_cols: w.cols,
            right_rows: bias.rows,
            right_cols: bias.cols,
        });
    }
    let (b, d_in, d_out) = (x.rows, x.cols, w.rows);
    let mut out = vec![0.0; b * d_out];
    for i in 0..b {
        let x_row = &x.values[i * d_in..(i + 1) * d_in];
        let o_row = &mut out[i * d_out..(i + 1) * d_out];
        for j in 0..d_out {
            let w_row = &w.values[j * d_in..(j + 1) * d_in];
            let mut acc = 0.0;
            for (xv, wv) in x_row.iter().zip(w_row) {
                acc += xv * wv;
            }
            o_row[j] = acc + bias.values[j];
        }
    }
    Matrix::raw_unchecked(b, d_out, out).checked("affine")
}

/// GELU under the tanh approximation:
/// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))`.
pub fn gelu(x: &Matrix) -> Matrix {
    Matrix::raw(
        x.rows,
        x.cols,
        x.values.iter().map(|&v| gelu_scalar(v)).collect(),
    )
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax with max-subtraction.
///
/// Each output row sums to 1 within 1e-12 and every entry is strictly
/// positive (see [`SOFTMAX_EXP_FLOOR`]). Tied inputs produce equal outputs.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let (b, t) = (logits.rows, logits.cols);
    let mut out = vec![0.0; b * t];
    for i in 0..b {
        let row = &logits.values[i * t..(i + 1) * t];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let o_row = &mut out[i * t..(i + 1) * t];
        let mut sum = 0.0;
        for (o, &v) in o_row.iter_mut().zip(row) {
            let e = ((v - max).max(SOFTMAX_EXP_FLOOR)).exp();
            *o = e;
            sum += e;
        }
        for o in o_row.iter_mut() {
            *o /= sum;
        }
    }
    Matrix::raw(b, t, out)
}

/// Mean negative log-likelihood of the target class per row:
/// `mean_i( -ln probs[i, targets[i]] )`.
pub fn cross_entropy(probs: &Matrix, targets: &[usize]) -> Result<f64> {
    if targets.len() != probs.rows {
        return Err(Error::Contract(format!(
            "cross_entropy: {} targets for {} rows",
            targets.len(),
            probs.rows
        )));
    }
    if probs.rows == 0 {
        return Err(Error::Contract("cross_entropy on an empty batch".into()));
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= probs.cols {
            return Err(Error::Index {
                what: "target class",
                index: t,
                size: probs.cols,
            });
        }
        total -= probs.get(i, t).ln();
    }
    let loss = total / probs.rows as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite { op: "cross_entropy" })
    }
}

/// Cosine similarity `u . v / (|u| |v|)`, clamped into [-1, 1].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Contract(format!(
            "cosine_similarity: length mismatch {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain(
            "cosine_similarity requires nonzero-norm inputs".into(),
        ));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Handle to a value recorded on a [`ComputationTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf { tracked: bool },
    MatMul { a: NodeId, b: NodeId },
    Affine { x: NodeId, w: NodeId, bias: NodeId },
    Gelu { x: NodeId },
    SoftmaxRows { x: NodeId },
    Scale { x: NodeId, factor: f64 },
    Sum { x: NodeId },
    CrossEntropy { probs: NodeId, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    /// True when this node's subtree contains a tracked leaf, i.e. a gradient
    /// must flow through it. Lets backward skip work on frozen constants
    /// (embedding tables, input features).
    requires: bool,
}

/// Gradients produced by [`ComputationTape::backward`], indexed by node.
///
/// Tracked parameters always hold a gradient (zeros when the loss does not
/// depend on them); untracked leaves hold none.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Define-by-run reverse-mode autodiff tape.
///
/// Nodes form an arena; ids are assigned in insertion order, which is a
/// topological order of the dataflow graph by construction. A tape is
/// single-owner: build a fresh one per forward pass.
#[derive(Debug, Default)]
pub struct ComputationTape {
    nodes: Vec<Node>,
}

impl ComputationTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an untracked constant (inputs, frozen tables).
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf { tracked: false }, false)
    }

    /// Records a tracked parameter: backward will produce its gradient.
    pub fn parameter(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf { tracked: true }, true)
    }

    /// Forward value of a recorded node.
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul(self.value(a), self.value(b))?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MatMul { a, b }, requires))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = affine(self.value(x), self.value(w), self.value(bias))?;
        let requires = self.requires(x) || self.requires(w) || self.requires(bias);
        Ok(self.push(value, Op::Affine { x, w, bias }, requires))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = gelu(self.value(x));
        let requires = self.requires(x);
        self.push(value, Op::Gelu { x }, requires)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let value = softmax_rows(self.value(x));
        let requires = self.requires(x);
        self.push(value, Op::SoftmaxRows { x }, requires)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.value(x).scale(factor)?;
        let requires = self.requires(x);
        Ok(self.push(value, Op::Scale { x, factor }, requires))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).values().iter().sum();
        let requires = self.requires(x);
        self.push(
            Matrix::raw(1, 1, vec![total]),
            Op::Sum { x },
            requires,
        )
    }

    /// Mean negative log-likelihood as a 1x1 node; see [`cross_entropy`].
    pub fn cross_entropy(&mut self, probs: NodeId, targets: &[usize]) -> Result<NodeId> {
        let loss = cross_entropy(self.value(probs), targets)?;
        let requires = self.requires(probs);
        Ok(self.push(
            Matrix::raw(1, 1, vec![loss]),
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
            requires,
        ))
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    fn push(&mut self, value: Matrix, op: Op, requires: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss node.
    ///
    /// Visits each node at most once in reverse insertion order; gradients
    /// accumulate into tracked parameters. Tracked parameters the loss does
    /// not depend on receive explicit zeros; untracked leaves receive none.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.rows() != 1 || loss_value.cols() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss node, got {}x{}",
                loss_value.rows(),
                loss_value.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::raw(1, 1, vec![1.0]));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf { .. } => {}
                Op::MatMul { a, b } => {
                    if self.requires(*a) {
                        let da = matmul(&g, &self.value(*b).transpose())?;
                        accumulate(&mut grads, *a, da);
                    }
                    if self.requires(*b) {
                        let db = matmul(&self.value(*a).transpose(), &g)?;
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Affine { x, w, bias } => {
                    if self.requires(*x) {
                        let dx = matmul(&g, self.value(*w))?;
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.requires(*w) {
                        let dw = matmul(&g.transpose(), self.value(*x))?;
                        accumulate(&mut grads, *w, dw);
                    }
                    if self.requires(*bias) {
                        let db = column_sums(&g);
                        accumulate(&mut grads, *bias, db);
                    }
                }
                Op::Gelu { x } => {
                    if self.requires(*x) {
                        let xv = self.value(*x);
                        let dx = Matrix::raw(
                            xv.rows(),
                            xv.cols(),
                            xv.values()
                                .iter()
                                .zip(g.values())
                                .map(|(&xi, &gi)| gi * gelu_derivative_scalar(xi))
                                .collect(),
                        );
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::SoftmaxRows { x } => {
                    if self.requires(*x) {
                        let y = &self.nodes[id].value;
                        let (b, t) = (y.rows(), y.cols());
                        let mut dx = vec![0.0; b * t];
                        for i in 0..b {
                            let y_row = y.row(i);
                            let g_row = &g.values()[i * t..(i + 1) * t];
                            let dot: f64 =
                                y_row.iter().zip(g_row).map(|(&yv, &gv)| yv * gv).sum();
                            let d_row = &mut dx[i * t..(i + 1) * t];
                            for ((d, &yv), &gv) in d_row.iter_mut().zip(y_row).zip(g_row) {
                                *d = yv * (gv - dot);
                            }
                        }
                        accumulate(&mut grads, *x, Matrix::raw(b, t, dx));
                    }
                }
                Op::Scale { x, factor } => {
                    if self.requires(*x) {
                        accumulate(&mut grads, *x, g.scale(*factor)?);
                    }
                }
                Op::Sum { x } => {
                    if self.requires(*x) {
                        let xv = self.value(*x);
                        let seed = g.get(0, 0);
                        accumulate(
                            &mut grads,
                            *x,
                            Matrix::raw(xv.rows(), xv.cols(), vec![seed; xv.values().len()]),
                        );
                    }
                }
                Op::CrossEntropy { probs, targets } => {
                    if self.requires(*probs) {
                        let p = self.value(*probs);
                        let (b, t) = (p.rows(), p.cols());
                        let seed = g.get(0, 0);
                        let mut dp = vec![0.0; b * t];
                        for (i, &target) in targets.iter().enumerate() {
                            dp[i * t + target] = -seed / (b as f64 * p.get(i, target));
                        }
                        accumulate(&mut grads, *probs, Matrix::raw_unchecked(b, t, dp).checked("cross_entropy backward")?);
                    }
                }
            }
            grads[id] = Some(g);
        }

        // The loss may not touch every tracked parameter; those still owe a
        // (zero) gradient by contract.
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { tracked: true } = node.op {
                if grads[i].is_none() {
                    grads[i] = Some(Matrix::zeros(node.value.rows(), node.value.cols()));
                }
            } else if !matches!(node.op, Op::Leaf { .. }) {
                // Interior activations are implementation detail; don't hand
                // them out.
                if i != loss.0 {
                    grads[i] = None;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Column sums as a 1 x cols matrix (bias gradient).
fn column_sums(m: &Matrix) -> Matrix {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    Matrix::raw(1, m.cols(), out)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn finite_logits(len: usize, magnitude: f64) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-magnitude..magnitude, len)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_are_simplex_points(values in finite_logits(24, 1000.0)) {
            let logits = Matrix::new(2, 12, values).unwrap();
            let y = softmax_rows(&logits);
            for r in 0..2 {
                let sum: f64 = y.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(y.row(r).iter().all(|&v| v > 0.0));
            }
        }

        #[test]
        fn cosine_is_positive_scale_invariant(
            u in finite_logits(6, 10.0),
            v in finite_logits(6, 10.0),
            s in 1e-3f64..1e3,
        ) {
            let nu: f64 = u.iter().map(|x| x * x).sum();
            let nv: f64 = v.iter().map(|x| x * x).sum();
            prop_assume!(nu > 1e-9 && nv > 1e-9);
            let su: Vec<f64> = u.iter().map(|x| x * s).collect();
            let a = cosine_similarity(&u, &v).unwrap();
            let b = cosine_similarity(&su, &v).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn softmax_shift_invariance_is_bitwise_for_exact_shifts(
            values in proptest::collection::vec(-100i32..100, 8),
            c in -50i32..50,
        ) {
            // Integer-valued logits and shifts are exact in f64, so the two
            // computations see bit-identical shifted logits.
            let base = Matrix::new(1, 8, values.iter().map(|&v| v as f64).collect()).unwrap();
            let shifted = Matrix::new(1, 8, values.iter().map(|&v| (v + c) as f64).collect()).unwrap();
            prop_assert_eq!(softmax_rows(&base), softmax_rows(&shifted));
        }

        #[test]
        fn softmax_shift_invariance_is_tight_for_real_shifts(values in finite_logits(8, 100.0), c in -50.0f64..50.0) {
            let base = Matrix::new(1, 8, values.clone()).unwrap();
            let shifted = Matrix::new(1, 8, values.iter().map(|v| v + c).collect()).unwrap();
            let a = softmax_rows(&base);
            let b = softmax_rows(&shifted);
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
