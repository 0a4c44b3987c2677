//! Slow, independent reference computations.
//!
//! Nothing here shares a code path with the routine it checks: determinants
//! by cofactor expansion, symmetric polynomials by subset enumeration,
//! operator spectra by Nyström discretisation, and lattice spectra by
//! exhaustive enumeration and sorting.

use crate::dpp::{quality, similarity, KernelParams, SpectrumModel};
use crate::error::Result;
use crate::linalg::{eigvalsh, Matrix};

/// Determinant by Laplace expansion along the first row. Exponential cost;
/// intended for n ≤ 8.
pub fn det_cofactor(a: &Matrix) -> f64 {
    let n = a.rows();
    let idx: Vec<usize> = (0..n).collect();
    fn rec(a: &Matrix, row: usize, cols: &[usize]) -> f64 {
        if cols.is_empty() {
            return 1.0;
        }
        let mut total = 0.0;
        for (pos, &c) in cols.iter().enumerate() {
            let entry = a.get(row, c);
            if entry == 0.0 {
                continue;
            }
            let rest: Vec<usize> = cols.iter().copied().filter(|&x| x != c).collect();
            let sign = if pos % 2 == 0 { 1.0 } else { -1.0 };
            total += sign * entry * rec(a, row + 1, &rest);
        }
        total
    }
    rec(a, 0, &idx)
}

/// `e_k(λ)` summed over all `k`-subsets (bitmask enumeration, length ≤ 20).
pub fn esp_bruteforce(lambdas: &[f64], k: usize) -> f64 {
    let n = lambdas.len();
    assert!(n <= 20, "subset enumeration limited to 20 values");
    let mut total = 0.0;
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let mut prod = 1.0;
        for (i, l) in lambdas.iter().enumerate() {
            if mask & (1 << i) != 0 {
                prod *= l;
            }
        }
        total += prod;
    }
    total
}

/// Eigenvalues of `T f(x) = ∫ q(x) k(x, y) q(y) f(y) dy` on `[−half_width,
/// half_width]` via trapezoid-weighted Nyström discretisation (1-D kernels).
pub fn nystrom_eigenvalues(params: &KernelParams, nodes: usize, half_width: f64) -> Result<Vec<f64>> {
    assert_eq!(params.dim(), 1, "Nyström oracle is one-dimensional");
    assert!(nodes >= 2);
    let h = 2.0 * half_width / (nodes - 1) as f64;
    let xs: Vec<f64> = (0..nodes).map(|i| -half_width + i as f64 * h).collect();
    let sqrt_w: Vec<f64> = (0..nodes)
        .map(|i| if i == 0 || i == nodes - 1 { (0.5 * h).sqrt() } else { h.sqrt() })
        .collect();
    let q: Vec<f64> = xs.iter().map(|&x| quality(&[x], params)).collect();
    let m = Matrix::from_fn(nodes, nodes, |i, j| {
        sqrt_w[i] * q[i] * similarity(&[xs[i]], &[xs[j]], params) * q[j] * sqrt_w[j]
    });
    eigvalsh(&m)
}

/// All lattice eigenvalues with every `n_d ≤ max_index`, sorted descending
/// (ties by lexicographic multi-index).
pub fn lattice_bruteforce(params: &KernelParams, max_index: u32) -> Result<Vec<(f64, Vec<u32>)>> {
    let model = SpectrumModel::new(params)?;
    let d = params.dim();
    let mut out = Vec::new();
    let mut index = vec![1u32; d];
    loop {
        out.push((model.log_eigenvalue(&index).exp(), index.clone()));
        let mut pos = d;
        loop {
            if pos == 0 {
                out.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
                return Ok(out);
            }
            pos -= 1;
            if index[pos] < max_index {
                index[pos] += 1;
                for later in &mut index[pos + 1..] {
                    *later = 1;
                }
                break;
            }
        }
    }
}

/// `∫ q(x)² dx` by the trapezoid rule on a tensor grid over
/// `[−half_width, half_width]^D` (D ≤ 2).
pub fn quality_squared_integral(params: &KernelParams, nodes: usize, half_width: f64) -> f64 {
    let h = 2.0 * half_width / (nodes - 1) as f64;
    let w = |i: usize| if i == 0 || i == nodes - 1 { 0.5 * h } else { h };
    let x = |i: usize| -half_width + i as f64 * h;
    match params.dim() {
        1 => (0..nodes).map(|i| w(i) * quality(&[x(i)], params).powi(2)).sum(),
        2 => {
            let mut total = 0.0;
            for i in 0..nodes {
                for j in 0..nodes {
                    total += w(i) * w(j) * quality(&[x(i), x(j)], params).powi(2);
                }
            }
            total
        }
        d => panic!("quadrature oracle supports D ≤ 2, got {d}"),
    }
}
