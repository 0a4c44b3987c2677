//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in execution order; [`Var`] is a
//! lightweight handle into it. [`Tape::backward`] walks the tape in exact
//! reverse order and accumulates (`+=`) gradients into every node that
//! depends on a leaf created with [`Tape::leaf`].
//!
//! One tape is meant to live for one training step. Calling `backward` twice
//! without [`Tape::zero_grad`] in between is an error.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, CholeskyFactor, JitterPolicy, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Neg(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    BroadcastRow(Var),
    BroadcastCol(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    LogDetSpd(Var, Box<CholeskyFactor>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    jitter: JitterPolicy,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_jitter(jitter: JitterPolicy) -> Self {
        Self {
            jitter,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
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

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, zero-filled when nothing flowed into it.
    pub fn grad_or_zero(&self, v: Var) -> Matrix {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.consumed = false;
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Elementwise clamp; the gradient is passed only inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::scalar(m.sum() / m.len() as f64);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// r x n -> r x 1 row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let sums: Vec<f64> = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Matrix::col_vector(&sums), Op::RowSum(a), rg)
    }

    /// Repeats a 1 x n row `rows` times.
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Result<Var> {
        let m = self.value(a);
        if m.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_row",
                left: m.shape(),
                right: (1, m.cols()),
            });
        }
        let value = Matrix::from_fn(rows, m.cols(), |_, j| m.get(0, j));
        let rg = self.rg(a);
        Ok(self.push(value, Op::BroadcastRow(a), rg))
    }

    /// Repeats an r x 1 column `cols` times.
    pub fn broadcast_col(&mut self, a: Var, cols: usize) -> Result<Var> {
        let m = self.value(a);
        if m.cols() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_col",
                left: m.shape(),
                right: (m.rows(), 1),
            });
        }
        let value = Matrix::from_fn(m.rows(), cols, |i, _| m.get(i, 0));
        let rg = self.rg(a);
        Ok(self.push(value, Op::BroadcastCol(a), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.value(a);
        if start > end || end > m.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: m.shape(),
                right: (start, end),
            });
        }
        let idx: Vec<usize> = (start..end).collect();
        let value = m.select_rows(&idx);
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.value(a);
        if start > end || end > m.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: m.shape(),
                right: (start, end),
            });
        }
        let value = m.slice_cols(start, end);
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::ShapeMismatch {
            op: "concat_rows",
            left: (0, 0),
            right: (0, 0),
        })?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(mismatch("concat_rows", self.value(*first), m));
            }
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Matrix::new(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// `ln det A` of a symmetric positive-definite node.
    ///
    /// Uses the tape's jitter policy; if jitter was needed the value and the
    /// gradient both refer to `A + jitter·I`.
    pub fn logdet_spd(&mut self, a: Var) -> Result<Var> {
        let factor = cholesky(self.value(a), &self.jitter)?;
        let value = Matrix::scalar(factor.log_det());
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogDetSpd(a, Box::new(factor)), rg))
    }

    /// Jitter applied by a `logdet_spd` node (0 for other nodes).
    pub fn jitter_applied(&self, v: Var) -> f64 {
        match &self.nodes[v.0].op {
            Op::LogDetSpd(_, f) => f.jitter_applied,
            _ => 0.0,
        }
    }

    /// Back-propagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalarLoss { rows, cols });
        }
        self.consumed = true;
        self.accumulate(loss, Matrix::scalar(1.0))?;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            let contributions = self.local_gradients(idx, g)?;
            for (target, contribution) in contributions {
                self.accumulate(target, contribution)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Matrix) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return Ok(());
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g)?,
            None => node.grad = Some(g),
        }
        Ok(())
    }

    fn local_gradients(&self, idx: usize, g: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.rg(a) {
                    res.push((a, g.matmul_t(val(b))?));
                }
                if self.rg(b) {
                    res.push((b, val(a).t_matmul(g)?));
                }
            }
            &Op::Transpose(a) => res.push((a, g.transpose())),
            &Op::Add(a, b) => {
                res.push((a, g.clone()));
                res.push((b, g.clone()));
            }
            &Op::Sub(a, b) => {
                res.push((a, g.clone()));
                res.push((b, g.scale(-1.0)));
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    res.push((a, g.hadamard(val(b))?));
                }
                if self.rg(b) {
                    res.push((b, g.hadamard(val(a))?));
                }
            }
            &Op::Scale(a, c) => res.push((a, g.scale(c))),
            &Op::AddScalar(a) => res.push((a, g.clone())),
            &Op::Exp(a) => res.push((a, g.hadamard(out)?)),
            &Op::Log(a) => res.push((a, g.zip_map(val(a), "log_grad", |gi, x| gi / x)?)),
            &Op::Square(a) => res.push((a, g.zip_map(val(a), "square_grad", |gi, x| 2.0 * x * gi)?)),
            &Op::Neg(a) => res.push((a, g.scale(-1.0))),
            &Op::Sum(a) => {
                let (r, c) = val(a).shape();
                res.push((a, Matrix::filled(r, c, g.item())));
            }
            &Op::Mean(a) => {
                let (r, c) = val(a).shape();
                res.push((a, Matrix::filled(r, c, g.item() / (r * c) as f64)));
            }
            &Op::RowSum(a) => {
                let (r, c) = val(a).shape();
                res.push((a, Matrix::from_fn(r, c, |i, _| g.get(i, 0))));
            }
            &Op::Relu(a) => {
                res.push((a, g.zip_map(val(a), "relu_grad", |gi, x| if x > 0.0 { gi } else { 0.0 })?))
            }
            &Op::Sigmoid(a) => res.push((a, g.zip_map(out, "sigmoid_grad", |gi, s| gi * s * (1.0 - s))?)),
            &Op::Softplus(a) => {
                res.push((a, g.zip_map(val(a), "softplus_grad", |gi, x| gi * sigmoid(x))?))
            }
            &Op::Clamp(a, lo, hi) => res.push((
                a,
                g.zip_map(val(a), "clamp_grad", |gi, x| if (lo..=hi).contains(&x) { gi } else { 0.0 })?,
            )),
            &Op::BroadcastRow(a) => {
                let cols = g.cols();
                let mut sums = vec![0.0; cols];
                for i in 0..g.rows() {
                    for (s, v) in sums.iter_mut().zip(g.row(i)) {
                        *s += v;
                    }
                }
                res.push((a, Matrix::row_vector(&sums)));
            }
            &Op::BroadcastCol(a) => {
                let sums: Vec<f64> = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                res.push((a, Matrix::col_vector(&sums)));
            }
            &Op::SliceRows(a, start) => {
                let (r, c) = val(a).shape();
                let mut full = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    full.row_mut(start + i).copy_from_slice(g.row(i));
                }
                res.push((a, full));
            }
            &Op::SliceCols(a, start) => {
                let (r, c) = val(a).shape();
                let mut full = Matrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..g.cols() {
                        full.set(i, start + j, g.get(i, j));
                    }
                }
                res.push((a, full));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    let idx: Vec<usize> = (offset..offset + rows).collect();
                    res.push((p, g.select_rows(&idx)));
                    offset += rows;
                }
            }
            Op::LogDetSpd(a, factor) => res.push((*a, factor.inverse().scale(g.item()))),
        }
        Ok(res)
    }
}

/// Worst relative error between tape gradients and central differences.
///
/// `f` maps a leaf holding `point` to a scalar node. The relative error of
/// each entry is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidConfig(format!("grad_check step {h} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = tape.grad_or_zero(x);

    let eval = |p: Matrix| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(p);
        let out = f(&mut t, v)?;
        Ok(t.scalar(out))
    };

    let mut worst: f64 = 0.0;
    for k in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[k] += h;
        let mut minus = point.clone();
        minus.data_mut()[k] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
