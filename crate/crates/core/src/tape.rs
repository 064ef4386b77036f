//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied during one forward pass,
//! keeping the values the backward rules need. Handles are plain indices
//! ([`Var`]) so model code can copy them freely. A tape built with
//! [`Tape::inference`] computes values only.
//!
//! Broadcasting is limited to adding a row-vector bias in [`Tape::linear`]
//! and [`Tape::layer_norm`]; every other shape mismatch is an error.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::matrix::DenseMatrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: DenseMatrix,
        inv_std: Vec<f64>,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SpdSolve {
        a: Var,
        b: Var,
        chol: Arc<Cholesky>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    consumed: bool,
    chol_cache: HashMap<Var, Arc<Cholesky>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
            chol_cache: HashMap::new(),
        }
    }

    /// A tape that only evaluates; `backward` yields no gradients.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        let rg = self.recording;
        self.push_node(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        if m.shape() != (1, 1) {
            return Err(Error::NonScalarLoss(m.rows(), m.cols()));
        }
        Ok(m.get(0, 0))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: DenseMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: DenseMatrix, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("tape op {name}")));
        }
        let rg = self.recording && inputs.iter().any(|&v| self.requires(v));
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push_node(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&DenseMatrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = DenseMatrix::concat_columns(&mats)?;
        self.push("concat_columns", out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn slice_columns(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_columns(start, end)?;
        self.push("slice_columns", out, Op::Slice(a, start), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).positive_part();
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// Softmax of an `m×n` score matrix over its rows: column `j` holds the
    /// attention of target `j` over all `m` sources.
    pub fn softmax_over_sources(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a);
        let (m, n) = s.shape();
        let mut out = DenseMatrix::zeros(m, n);
        for j in 0..n {
            let mx = (0..m).fold(f64::NEG_INFINITY, |acc, i| acc.max(s.get(i, j)));
            let mut total = 0.0;
            for i in 0..m {
                let e = (s.get(i, j) - mx).exp();
                out.set(i, j, e);
                total += e;
            }
            for i in 0..m {
                out.set(i, j, out.get(i, j) / total);
            }
        }
        self.push("softmax_over_sources", out, Op::Softmax(a), &[a])
    }

    /// Normalizes each row over the feature axis, then applies `gain` and
    /// `bias` (both `1×d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(Error::dims("layer_norm", format!("gain/bias must be 1x{d}")));
        }
        let mut xhat = DenseMatrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (k, &v) in row.iter().enumerate() {
                xhat.set(i, k, (v - mu) * is);
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let out = DenseMatrix::from_fn(n, d, |i, k| xhat.get(i, k) * g.get(0, k) + b.get(0, k));
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// `x·weight + bias`, with `bias` a `1×k` row added to every row.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let mut out = self.value(x).matmul(self.value(weight))?;
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != (1, out.cols()) {
                return Err(Error::dims("linear", format!("bias must be 1x{}", out.cols())));
            }
            let k = out.cols();
            for (idx, o) in out.data_mut().iter_mut().enumerate() {
                *o += bv.get(0, idx % k);
            }
            inputs.push(b);
        }
        self.push("linear", out, Op::Linear { x, weight, bias }, &inputs)
    }

    /// `A⁻¹B` for symmetric positive-definite `A`. The factorization is
    /// cached per `A` node, so repeated solves against one Gram matrix
    /// factor it once.
    pub fn spd_solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let chol = match self.chol_cache.get(&a) {
            Some(c) => c.clone(),
            None => {
                let c = Arc::new(Cholesky::factor(self.value(a))?);
                self.chol_cache.insert(a, c.clone());
                c
            }
        };
        let out = chol.solve(self.value(b))?;
        self.push("spd_solve", out, Op::SpdSolve { a, b, chol }, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = DenseMatrix::filled(1, 1, self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = DenseMatrix::filled(1, 1, self.value(a).mean());
        self.push("mean", out, Op::Mean(a), &[a])
    }

    /// Backpropagates from a scalar `loss`. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.scalar(loss)?;
        self.consumed = true;

        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        if !self.requires(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, d: DenseMatrix| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                            *e += x;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.requires(*a) {
                        acc(*a, g.matmul_unchecked(&bv.transpose()));
                    }
                    if self.requires(*b) {
                        acc(*b, av.transpose().matmul_unchecked(&g));
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.scale(-1.0));
                }
                Op::Scale(a, c) => acc(*a, g.scale(*c)),
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, g.hadamard(bv)?);
                    acc(*b, g.hadamard(av)?);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        acc(p, g.slice_columns(start, start + w)?);
                        start += w;
                    }
                }
                Op::Slice(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let w = g.cols();
                    let d = DenseMatrix::from_fn(rows, cols, |i, j| {
                        if j >= *start && j < start + w {
                            g.get(i, j - start)
                        } else {
                            0.0
                        }
                    });
                    acc(*a, d);
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let d = DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| {
                        if av.get(i, j) > 0.0 {
                            g.get(i, j)
                        } else {
                            0.0
                        }
                    });
                    acc(*a, d);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let (m, n) = y.shape();
                    let mut d = DenseMatrix::zeros(m, n);
                    for j in 0..n {
                        let dot: f64 = (0..m).map(|i| g.get(i, j) * y.get(i, j)).sum();
                        for i in 0..m {
                            d.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    acc(*a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let (n, d) = xhat.shape();
                    if self.requires(*gain) || self.requires(*bias) {
                        let mut dg = DenseMatrix::zeros(1, d);
                        let mut db = DenseMatrix::zeros(1, d);
                        for i in 0..n {
                            for k in 0..d {
                                dg.set(0, k, dg.get(0, k) + g.get(i, k) * xhat.get(i, k));
                                db.set(0, k, db.get(0, k) + g.get(i, k));
                            }
                        }
                        acc(*gain, dg);
                        acc(*bias, db);
                    }
                    if self.requires(*x) {
                        let mut dx = DenseMatrix::zeros(n, d);
                        for i in 0..n {
                            let dxhat: Vec<f64> = (0..d).map(|k| g.get(i, k) * gv.get(0, k)).collect();
                            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                            let mean_dx =
                                (0..d).map(|k| dxhat[k] * xhat.get(i, k)).sum::<f64>() / d as f64;
                            for k in 0..d {
                                dx.set(i, k, inv_std[i] * (dxhat[k] - mean_d - xhat.get(i, k) * mean_dx));
                            }
                        }
                        acc(*x, dx);
                    }
                }
                Op::Linear { x, weight, bias } => {
                    let (xv, wv) = (self.value(*x), self.value(*weight));
                    if self.requires(*x) {
                        acc(*x, g.matmul_unchecked(&wv.transpose()));
                    }
                    if self.requires(*weight) {
                        acc(*weight, xv.transpose().matmul_unchecked(&g));
                    }
                    if let Some(b) = bias {
                        let k = g.cols();
                        let mut db = DenseMatrix::zeros(1, k);
                        for i in 0..g.rows() {
                            for c in 0..k {
                                db.set(0, c, db.get(0, c) + g.get(i, c));
                            }
                        }
                        acc(*b, db);
                    }
                }
                Op::SpdSolve { a, b, chol } => {
                    // X = A⁻¹B: dB = A⁻ᵀG = A⁻¹G, dA = −dB Xᵀ
                    let db = chol.solve(&g)?;
                    if self.requires(*a) {
                        acc(*a, db.matmul_unchecked(&node.value.transpose()).scale(-1.0));
                    }
                    acc(*b, db);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(*a, DenseMatrix::filled(r, c, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    acc(*a, DenseMatrix::filled(r, c, g.get(0, 0) / (r * c) as f64));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Central-difference check of the tape gradient of `f` at `theta`.
///
/// `f` builds a scalar loss on a tape from a leaf holding `theta`. Returns
/// the largest `|g_ad − g_fd| / (|g_fd| + 1e-8)` over all elements.
pub fn finite_diff_check<F>(f: F, theta: &DenseMatrix, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(theta.clone());
    let loss = f(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| DenseMatrix::zeros(theta.rows(), theta.cols()));

    let eval = |t: DenseMatrix| -> Result<f64> {
        let mut tape = Tape::inference();
        let x = tape.constant(t);
        let loss = f(&mut tape, x)?;
        tape.scalar(loss)
    };
    let mut worst = 0.0f64;
    for k in 0..theta.len() {
        let mut plus = theta.clone();
        plus.data_mut()[k] += step;
        let mut minus = theta.clone();
        minus.data_mut()[k] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic.data()[k] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rv(v: &[f64]) -> DenseMatrix {
        DenseMatrix::row_vector(v).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let x = t.leaf(rv(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(rv(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_of_constant_column_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::filled(4, 2, 3.7));
        let y = t.softmax_over_sources(x).unwrap();
        assert!(t.value(y).data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
    }

    #[test]
    fn spd_solve_identity_is_exact() {
        let mut t = Tape::new();
        let a = t.constant(DenseMatrix::identity(3));
        let bm = DenseMatrix::from_fn(3, 2, |i, j| (i as f64 - 1.3) * (j as f64 + 0.7));
        let b = t.leaf(bm.clone());
        let x = t.spd_solve(a, b).unwrap();
        assert_eq!(t.value(x), &bm);
    }

    #[test]
    fn spd_solve_rejects_indefinite() {
        let mut t = Tape::new();
        let a = t.constant(DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
        let b = t.constant(DenseMatrix::filled(2, 1, 1.0));
        assert!(matches!(t.spd_solve(a, b), Err(Error::NotSpd(_))));
    }

    #[test]
    fn layer_norm_of_constant_row_is_bias() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::filled(2, 4, 5.0));
        let g = t.leaf(rv(&[2.0; 4]));
        let b = t.leaf(rv(&[0.1, 0.2, 0.3, 0.4]));
        let y = t.layer_norm(x, g, b).unwrap();
        for i in 0..2 {
            assert_eq!(t.value(y).row(i), &[0.1, 0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(rv(&[1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_sum_gradient() {
        let a_val = DenseMatrix::from_fn(2, 3, |i, j| (i + 2 * j) as f64 - 1.5);
        let b_val = DenseMatrix::from_fn(3, 4, |i, j| 0.5 * i as f64 - 0.25 * j as f64);
        let mut t = Tape::new();
        let a = t.leaf(a_val.clone());
        let b = t.leaf(b_val.clone());
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c).unwrap();
        let g = t.backward(s).unwrap();
        // d/dA sum(AB) = 1 Bᵀ: row sums of B broadcast over rows
        let expect_a = DenseMatrix::filled(2, 4, 1.0).matmul(&b_val.transpose()).unwrap();
        let expect_b = a_val.transpose().matmul(&DenseMatrix::filled(2, 4, 1.0)).unwrap();
        assert_eq!(g.get(a).unwrap(), &expect_a);
        assert_eq!(g.get(b).unwrap(), &expect_b);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(rv(&[1.0]));
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(rv(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(1, 2))));
    }

    #[test]
    fn shape_errors_surface() {
        let mut t = Tape::new();
        let a = t.leaf(DenseMatrix::zeros(2, 3));
        let b = t.leaf(DenseMatrix::zeros(2, 2));
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(a, a).is_err());
        let bias = t.leaf(DenseMatrix::zeros(1, 2));
        let w = t.leaf(DenseMatrix::zeros(3, 3));
        assert!(t.linear(a, w, Some(bias)).is_err());
    }

    #[test]
    fn half_squared_norm_check() {
        let theta = rv(&[0.3, -1.2, 2.5, 0.01]);
        let err = finite_diff_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                let s = t.sum(sq)?;
                t.scale(s, 0.5)
            },
            &theta,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn inference_tape_has_no_gradients() {
        let mut t = Tape::inference();
        let x = t.leaf(rv(&[1.0, 2.0]));
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(x).is_none());
    }
}
