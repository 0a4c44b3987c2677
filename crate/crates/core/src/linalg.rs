//! Dense row-major linear algebra.
//!
//! Everything here is sequential and allocation-explicit so that results are
//! bit-reproducible: summation order is fixed (ascending index) in every
//! reduction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn col_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// The scalar held by a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, n) = (self.rows, other.rows);
        Ok(Matrix::from_fn(m, n, |i, j| dot(self.row(i), other.row(j))))
    }

    pub fn zip_map(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn add_diagonal(&self, value: f64) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out.data[i * self.cols + i] += value;
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrize(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self.get(i, j) + self.get(j, i)))
    }

    fn require_square(&self) -> Result<()> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }

    fn require_symmetric(&self, tol: f64) -> Result<()> {
        self.require_square()?;
        let asym = self.max_asymmetry();
        if asym > tol * self.max_abs().max(1.0) {
            return Err(Error::NotSymmetric { max_asymmetry: asym });
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Escalating diagonal jitter used when a Cholesky factorisation fails.
///
/// The first retry adds `initial_relative * mean(diag)`; each further retry
/// multiplies the jitter by `growth`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub initial_relative: f64,
    pub growth: f64,
    pub max_retries: usize,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            initial_relative: 1e-6,
            growth: 10.0,
            max_retries: 3,
        }
    }
}

impl JitterPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    pub lower: Matrix,
    pub jitter_applied: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L y = b` in place for every column of `b`.
    fn forward_substitute(&self, b: &mut Matrix) {
        let n = self.dim();
        let l = &self.lower;
        for c in 0..b.cols() {
            for i in 0..n {
                let mut acc = b.get(i, c);
                for k in 0..i {
                    acc -= l.get(i, k) * b.get(k, c);
                }
                b.set(i, c, acc / l.get(i, i));
            }
        }
    }

    /// Solves `Lᵀ x = y` in place for every column.
    fn backward_substitute(&self, b: &mut Matrix) {
        let n = self.dim();
        let l = &self.lower;
        for c in 0..b.cols() {
            for i in (0..n).rev() {
                let mut acc = b.get(i, c);
                for k in (i + 1)..n {
                    acc -= l.get(k, i) * b.get(k, c);
                }
                b.set(i, c, acc / l.get(i, i));
            }
        }
    }

    /// Solves `(L Lᵀ) X = B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "cholesky_solve",
                left: self.lower.shape(),
                right: b.shape(),
            });
        }
        let mut x = b.clone();
        self.forward_substitute(&mut x);
        self.backward_substitute(&mut x);
        Ok(x)
    }

    /// Inverse of the factored matrix, symmetrised.
    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut x = Matrix::identity(n);
        self.forward_substitute(&mut x);
        self.backward_substitute(&mut x);
        x.symmetrize()
    }

    /// `L Lᵀ`, i.e. the input plus the applied jitter.
    pub fn reconstruct(&self) -> Matrix {
        self.lower.matmul_t(&self.lower).expect("square factor")
    }
}

fn try_cholesky(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a.get(j, j) + jitter;
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if diag <= 0.0 || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut acc = a.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, acc / ljj);
        }
    }
    Some(l)
}

/// Cholesky factorisation `A (+ jitter·I) = L Lᵀ`.
///
/// A plain factorisation is tried first; on failure the jitter escalates as
/// described by `policy`. The jitter that finally succeeded is recorded.
pub fn cholesky(a: &Matrix, policy: &JitterPolicy) -> Result<CholeskyFactor> {
    a.require_symmetric(1e-10)?;
    if !a.is_finite() {
        return Err(Error::NotPositiveDefinite {
            retries: 0,
            last_jitter: 0.0,
        });
    }
    if let Some(lower) = try_cholesky(a, 0.0) {
        return Ok(CholeskyFactor {
            lower,
            jitter_applied: 0.0,
        });
    }
    let n = a.rows().max(1);
    let mean_diag = (a.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = policy.initial_relative * mean_diag;
    for retry in 0..policy.max_retries {
        if let Some(lower) = try_cholesky(a, jitter) {
            log::debug!("cholesky succeeded with jitter {jitter:e} on retry {}", retry + 1);
            return Ok(CholeskyFactor {
                lower,
                jitter_applied: jitter,
            });
        }
        if retry + 1 < policy.max_retries {
            jitter *= policy.growth;
        }
    }
    Err(Error::NotPositiveDefinite {
        retries: policy.max_retries,
        last_jitter: if policy.max_retries == 0 { 0.0 } else { jitter },
    })
}

/// `ln det A` for a symmetric positive-definite matrix (default jitter policy).
pub fn log_det_spd(a: &Matrix) -> Result<f64> {
    Ok(cholesky(a, &JitterPolicy::default())?.log_det())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenDecomposition {
    /// Sorted descending.
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Matrix,
}

/// Eigenvalues only, sorted descending: Householder reduction to
/// tridiagonal form followed by implicit QL with Wilkinson shifts.
pub fn eigvalsh(a: &Matrix) -> Result<Vec<f64>> {
    a.require_symmetric(1e-10)?;
    let n = a.rows();
    let mut m = a.symmetrize().data().to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    for i in (1..n).rev() {
        let l = i - 1;
        let scale: f64 = (0..=l).map(|k| m[i * n + k].abs()).sum();
        if l == 0 || scale == 0.0 {
            e[i] = m[i * n + l];
            continue;
        }
        let mut h = 0.0;
        for k in 0..=l {
            m[i * n + k] /= scale;
            h += m[i * n + k] * m[i * n + k];
        }
        let f = m[i * n + l];
        let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
        e[i] = scale * g;
        h -= f * g;
        m[i * n + l] = f - g;
        let mut ff = 0.0;
        for j in 0..=l {
            let mut gg = 0.0;
            for k in 0..=j {
                gg += m[j * n + k] * m[i * n + k];
            }
            for k in (j + 1)..=l {
                gg += m[k * n + j] * m[i * n + k];
            }
            e[j] = gg / h;
            ff += e[j] * m[i * n + j];
        }
        let hh = ff / (h + h);
        for j in 0..=l {
            let f = m[i * n + j];
            let g = e[j] - hh * f;
            e[j] = g;
            for k in 0..=j {
                m[j * n + k] -= f * e[k] + g * m[i * n + k];
            }
        }
    }
    for i in 0..n {
        d[i] = m[i * n + i];
    }
    e.rotate_left(1);
    if n > 0 {
        e[n - 1] = 0.0;
    }
    let norm = d.iter().zip(&e).fold(0.0f64, |m, (x, y)| m.max(x.abs() + y.abs()));
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut mm = l;
            while mm + 1 < n {
                let dd = d[mm].abs() + d[mm + 1].abs();
                if e[mm].abs() <= f64::EPSILON * dd || e[mm].abs() <= f64::EPSILON * norm {
                    break;
                }
                mm += 1;
            }
            if mm == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::NoConvergence { sweeps: iter, off_norm: e[l].abs() });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[mm] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..mm).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[mm] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[mm] = 0.0;
        }
    }
    d.sort_by(|x, y| y.total_cmp(x));
    Ok(d)
}

pub const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j) * a.get(i, j);
            }
        }
    }
    s.sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps until the off-diagonal Frobenius norm drops below
/// `1e-12 · max(1, ‖A‖_F)`.
pub fn eigh(a: &Matrix) -> Result<EigenDecomposition> {
    a.require_symmetric(1e-10)?;
    let n = a.rows();
    let mut m = a.symmetrize();
    let mut v = Matrix::identity(n);
    let threshold = JACOBI_TOL * a.frobenius_norm().max(1.0);

    let mut off = off_diagonal_norm(&m);
    let mut sweeps = 0;
    while off >= threshold {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, off_norm: off });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let tau = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // columns: A ← A J
                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                // rows: A ← Jᵀ A
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        sweeps += 1;
        off = off_diagonal_norm(&m);
    }

    let diag = m.diagonal();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| diag[i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok(EigenDecomposition { values, vectors })
}

/// Principal component projection fitted on a samples x features matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// features x n_components, orthonormal columns.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

pub fn pca_fit(x: &Matrix, n_components: usize) -> Result<PcaModel> {
    let (n, f) = x.shape();
    if n_components == 0 || n < n_components.max(2) || f < n_components {
        return Err(Error::DegenerateInput(format!(
            "pca needs samples >= n_components and features >= n_components (got {n}x{f}, k={n_components})"
        )));
    }
    let mut mean = vec![0.0; f];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = Matrix::from_fn(n, f, |i, j| x.get(i, j) - mean[j]);
    let cov = centered.t_matmul(&centered)?.scale(1.0 / (n - 1) as f64).symmetrize();
    let total = cov.trace();
    let eig = eigh(&cov)?;
    let floor = 1e-12 * total.max(f64::MIN_POSITIVE);
    if total <= 0.0 || eig.values[n_components - 1] <= floor {
        return Err(Error::DegenerateInput(format!(
            "covariance rank below {n_components} (eigenvalues {:?})",
            &eig.values[..n_components]
        )));
    }
    let mut components = eig.vectors.slice_cols(0, n_components);
    for c in 0..n_components {
        let mut pivot = 0;
        for r in 0..f {
            if components.get(r, c).abs() > components.get(pivot, c).abs() {
                pivot = r;
            }
        }
        if components.get(pivot, c) < 0.0 {
            for r in 0..f {
                components.set(r, c, -components.get(r, c));
            }
        }
    }
    let explained_variance: Vec<f64> = eig.values[..n_components].to_vec();
    let explained_variance_ratio = explained_variance.iter().map(|v| v / total).collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        explained_variance_ratio,
    })
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.cols()
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "pca_transform",
                left: x.shape(),
                right: self.components.shape(),
            });
        }
        let centered = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - self.mean[j]);
        centered.matmul(&self.components)
    }

    pub fn inverse_transform(&self, y: &Matrix) -> Result<Matrix> {
        let back = y.matmul_t(&self.components)?;
        Ok(Matrix::from_fn(back.rows(), back.cols(), |i, j| back.get(i, j) + self.mean[j]))
    }
}
