//! Continuous k-DPP machinery for a Gaussian quality/similarity kernel
//!
//! ```text
//! L(x, y) = q(x) k(x, y) q(y)
//! q(x)    = √α ∏_d (π ρ_d)^{-1/2} exp(−x_d² / (2ρ_d))
//! k(x, y) = ∏_d exp(−(x_d − y_d)² / (2σ_d))
//! ```
//!
//! The integral operator with kernel `L` has a closed-form spectrum indexed
//! by multi-indices `n ∈ ℕ^D`. Per dimension the eigenvalues form a geometric
//! sequence with
//!
//! ```text
//! γ_d = σ_d / ρ_d,   β_d = (1 + 2/γ_d)^{1/4}
//! lead_d  = (π ρ_d)^{-1/2} · ((β_d² + 1)/2 + 1/(2γ_d))^{-1/2}
//! ratio_d = 1 / (γ_d (β_d² + 1) + 1)
//! λ_n = α ∏_d lead_d · ratio_d^{n_d − 1}
//! ```
//!
//! The `(π ρ_d)^{-1/2}` factor in `lead_d` makes the spectrum belong to the
//! operator built from `q` exactly as written above (the trace equals
//! `∫ q(x)² dx = α ∏_d (π ρ_d)^{-1/2}`); the Nyström oracle in the tests
//! pins this down numerically.
//!
//! The k-DPP normaliser `e_k(λ_{1:∞})` has no closed form; it is bracketed by
//! a truncated elementary symmetric polynomial and a tail-corrected upper
//! bound, all evaluated in log space.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Hyperparameters of the quality/similarity kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelParams")]
pub struct KernelParams {
    /// Quality scale α.
    pub alpha: f64,
    /// Quality widths ρ_d.
    pub rho: Vec<f64>,
    /// Similarity widths σ_d.
    pub sigma: Vec<f64>,
}

#[derive(Deserialize)]
struct RawKernelParams {
    alpha: f64,
    rho: Vec<f64>,
    sigma: Vec<f64>,
}

impl TryFrom<RawKernelParams> for KernelParams {
    type Error = Error;

    fn try_from(raw: RawKernelParams) -> Result<Self> {
        KernelParams::new(raw.alpha, raw.rho, raw.sigma)
    }
}

impl KernelParams {
    pub fn new(alpha: f64, rho: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let params = Self { alpha, rho, sigma };
        params.validate()?;
        Ok(params)
    }

    /// Same ρ and σ in every dimension.
    pub fn isotropic(alpha: f64, rho: f64, sigma: f64, dim: usize) -> Result<Self> {
        Self::new(alpha, vec![rho; dim], vec![sigma; dim])
    }

    pub fn dim(&self) -> usize {
        self.rho.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.alpha) {
            return Err(Error::InvalidParams(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.rho.is_empty() || self.rho.len() != self.sigma.len() {
            return Err(Error::InvalidParams(format!(
                "rho and sigma need the same nonzero length (got {} and {})",
                self.rho.len(),
                self.sigma.len()
            )));
        }
        if !self.rho.iter().chain(&self.sigma).all(|&v| ok(v)) {
            return Err(Error::InvalidParams("rho and sigma entries must be positive and finite".into()));
        }
        Ok(())
    }

    fn check_point(&self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim(), "point dimension must match kernel dimension");
    }

    /// `ln q(0)`.
    pub fn log_quality_peak(&self) -> f64 {
        0.5 * self.alpha.ln() - 0.5 * self.rho.iter().map(|r| (PI * r).ln()).sum::<f64>()
    }
}

pub fn log_quality(x: &[f64], params: &KernelParams) -> f64 {
    params.check_point(x);
    let decay: f64 = x.iter().zip(&params.rho).map(|(xd, r)| xd * xd / (2.0 * r)).sum();
    params.log_quality_peak() - decay
}

pub fn quality(x: &[f64], params: &KernelParams) -> f64 {
    log_quality(x, params).exp()
}

pub fn similarity(x: &[f64], y: &[f64], params: &KernelParams) -> f64 {
    params.check_point(x);
    params.check_point(y);
    let e: f64 = x
        .iter()
        .zip(y)
        .zip(&params.sigma)
        .map(|((a, b), s)| (a - b) * (a - b) / (2.0 * s))
        .sum();
    (-e).exp()
}

struct KernelPieces {
    /// B x 1 column of ln q(z_n).
    log_q: Var,
    /// B x B matrix of ‖(z_n − z_m)/√σ‖² / 2.
    half_sq_dist: Var,
}

fn kernel_pieces(tape: &mut Tape, z: Var, params: &KernelParams) -> Result<KernelPieces> {
    let (b, d) = tape.value(z).shape();
    if d != params.dim() {
        return Err(Error::ShapeMismatch {
            op: "dpp_kernel",
            left: (b, d),
            right: (b, params.dim()),
        });
    }
    let inv_sqrt_sigma: Vec<f64> = params.sigma.iter().map(|s| 1.0 / s.sqrt()).collect();
    let w = tape.constant(Matrix::from_fn(b, d, |_, j| inv_sqrt_sigma[j]));
    let zs = tape.mul(z, w)?;
    let zs_t = tape.transpose(zs);
    let gram = tape.matmul(zs, zs_t)?;
    let zs_sq = tape.square(zs);
    let norms = tape.row_sum(zs_sq);
    let norms_rows = tape.broadcast_col(norms, b)?;
    let norms_cols = tape.transpose(norms_rows);
    let norm_sum = tape.add(norms_rows, norms_cols)?;
    let gram2 = tape.scale(gram, 2.0);
    let sq_dist = tape.sub(norm_sum, gram2)?;
    let half_sq_dist = tape.scale(sq_dist, 0.5);

    let inv_two_rho: Vec<f64> = params.rho.iter().map(|r| 1.0 / (2.0 * r)).collect();
    let rw = tape.constant(Matrix::from_fn(b, d, |_, j| inv_two_rho[j]));
    let z_sq = tape.square(z);
    let weighted = tape.mul(z_sq, rw)?;
    let decay = tape.row_sum(weighted);
    let neg_decay = tape.neg(decay);
    let log_q = tape.add_scalar(neg_decay, params.log_quality_peak());
    Ok(KernelPieces { log_q, half_sq_dist })
}

/// `L_Z` for a latent batch `z` (B x D), built from tape ops so gradients
/// reach `z`.
pub fn build_kernel_matrix(tape: &mut Tape, z: Var, params: &KernelParams) -> Result<Var> {
    let b = tape.value(z).rows();
    let KernelPieces { log_q, half_sq_dist } = kernel_pieces(tape, z, params)?;
    let lq_rows = tape.broadcast_col(log_q, b)?;
    let lq_cols = tape.transpose(lq_rows);
    let lq = tape.add(lq_rows, lq_cols)?;
    let exponent = tape.sub(lq, half_sq_dist)?;
    Ok(tape.exp(exponent))
}

/// `ln det L_Z − log_normalizer`, the k-DPP log density of a batch.
///
/// Evaluated as `2 Σ_n ln q(z_n) + ln det K_Z − log_normalizer` where `K_Z`
/// is the unit-diagonal similarity matrix: the same quantity as
/// `ln det build_kernel_matrix(z)`, but the jitter policy then acts on a
/// well-scaled matrix even when the qualities span many orders of magnitude.
pub fn dpp_log_prior(tape: &mut Tape, z: Var, params: &KernelParams, log_normalizer: f64) -> Result<Var> {
    let KernelPieces { log_q, half_sq_dist } = kernel_pieces(tape, z, params)?;
    let neg = tape.neg(half_sq_dist);
    let sim = tape.exp(neg);
    let logdet_sim = tape.logdet_spd(sim)?;
    let sum_log_q = tape.sum(log_q);
    let twice = tape.scale(sum_log_q, 2.0);
    let logdet = tape.add(twice, logdet_sim)?;
    Ok(tape.add_scalar(logdet, -log_normalizer))
}

/// Per-dimension closed-form spectrum parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimSpectrum {
    pub beta: f64,
    pub gamma: f64,
    /// `ln lead_d`.
    pub log_lead: f64,
    /// `ln ratio_d` (negative).
    pub log_ratio: f64,
}

impl DimSpectrum {
    pub fn new(rho: f64, sigma: f64) -> Self {
        let gamma = sigma / rho;
        let beta = (1.0 + 2.0 / gamma).powf(0.25);
        let b2 = beta * beta;
        let log_lead = -0.5 * (PI * rho).ln() - 0.5 * ((b2 + 1.0) / 2.0 + 1.0 / (2.0 * gamma)).ln();
        let log_ratio = -(gamma * (b2 + 1.0) + 1.0).ln();
        Self {
            beta,
            gamma,
            log_lead,
            log_ratio,
        }
    }

    /// `Σ_n lead · ratioⁿ⁻¹`.
    pub fn trace(&self) -> f64 {
        self.log_lead.exp() / (1.0 - self.log_ratio.exp())
    }
}

/// Evaluates `ln λ_n` for multi-indices.
///
/// Dimensions with bitwise-identical parameters share one exponent sum, so
/// permuted indices of an isotropic kernel yield bitwise-identical values and
/// tie-breaking stays purely lexicographic.
#[derive(Clone, Debug)]
pub struct SpectrumModel {
    pub dims: Vec<DimSpectrum>,
    log_top: f64,
    /// (log_ratio, dimensions sharing it)
    groups: Vec<(f64, Vec<usize>)>,
}

impl SpectrumModel {
    pub fn new(params: &KernelParams) -> Result<Self> {
        params.validate()?;
        let dims: Vec<DimSpectrum> = params
            .rho
            .iter()
            .zip(&params.sigma)
            .map(|(&r, &s)| DimSpectrum::new(r, s))
            .collect();
        let log_top = params.alpha.ln() + dims.iter().map(|d| d.log_lead).sum::<f64>();
        let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
        for (i, d) in dims.iter().enumerate() {
            match groups.iter_mut().find(|(r, _)| r.to_bits() == d.log_ratio.to_bits()) {
                Some((_, members)) => members.push(i),
                None => groups.push((d.log_ratio, vec![i])),
            }
        }
        Ok(Self { dims, log_top, groups })
    }

    pub fn log_eigenvalue(&self, index: &[u32]) -> f64 {
        let mut acc = self.log_top;
        for (log_ratio, members) in &self.groups {
            let steps: u64 = members.iter().map(|&d| u64::from(index[d] - 1)).sum();
            acc += steps as f64 * log_ratio;
        }
        acc
    }

    /// Closed-form operator trace `α ∏_d lead_d / (1 − ratio_d)`.
    pub fn log_trace(&self) -> f64 {
        self.log_top - self.dims.iter().map(|d| (-d.log_ratio.exp()).ln_1p()).sum::<f64>()
    }
}

#[derive(Debug, Clone)]
struct Frontier {
    log_value: f64,
    index: Vec<u32>,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // max-heap on value; among equal values the lexicographically
        // smaller index pops first
        self.log_value
            .total_cmp(&other.log_value)
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// Best-first walk over the index lattice yielding eigenvalues in
/// non-increasing order.
pub struct SpectrumEnumerator {
    model: SpectrumModel,
    heap: BinaryHeap<Frontier>,
    seen: HashSet<Vec<u32>>,
}

impl SpectrumEnumerator {
    pub fn new(model: SpectrumModel) -> Self {
        let start = vec![1u32; model.dims.len()];
        let mut heap = BinaryHeap::new();
        heap.push(Frontier {
            log_value: model.log_eigenvalue(&start),
            index: start.clone(),
        });
        let mut seen = HashSet::new();
        seen.insert(start);
        Self { model, heap, seen }
    }
}

impl Iterator for SpectrumEnumerator {
    /// `(ln λ, multi-index)`
    type Item = (f64, Vec<u32>);

    fn next(&mut self) -> Option<Self::Item> {
        let top = self.heap.pop()?;
        for d in 0..top.index.len() {
            let mut succ = top.index.clone();
            succ[d] += 1;
            if self.seen.insert(succ.clone()) {
                self.heap.push(Frontier {
                    log_value: self.model.log_eigenvalue(&succ),
                    index: succ,
                });
            }
        }
        Some((top.log_value, top.index))
    }
}

/// The leading eigenvalues of the continuous kernel operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub log_eigenvalues: Vec<f64>,
    /// 1-based multi-index of each eigenvalue.
    pub multi_indices: Vec<Vec<u32>>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub operator_trace: f64,
    /// `tr(L)` minus the listed eigenvalues. Truncation adds the dropped
    /// eigenvalues back, so tails of nested truncations differ exactly by
    /// the eigenvalues between them.
    pub remainder: f64,
}

impl Spectrum {
    fn from_parts(model: &SpectrumModel, items: Vec<(f64, Vec<u32>)>) -> Self {
        let (log_eigenvalues, multi_indices): (Vec<f64>, Vec<Vec<u32>>) = items.into_iter().unzip();
        let eigenvalues: Vec<f64> = log_eigenvalues.iter().map(|l| l.exp()).collect();
        let operator_trace = model.log_trace().exp();
        Self {
            remainder: operator_trace - compensated_sum(&eigenvalues),
            eigenvalues,
            log_eigenvalues,
            multi_indices,
            beta: model.dims.iter().map(|d| d.beta).collect(),
            gamma: model.dims.iter().map(|d| d.gamma).collect(),
            operator_trace,
        }
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn partial_sum(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// `tr(L) − Σ_{n≤M} λ_n` (may be slightly negative from rounding).
    pub fn tail(&self) -> f64 {
        self.remainder
    }

    /// The first `m` entries.
    pub fn truncate(&self, m: usize) -> Spectrum {
        let m = m.min(self.len());
        // smallest first
        let dropped: Vec<f64> = self.eigenvalues[m..].iter().rev().copied().collect();
        Spectrum {
            remainder: self.remainder.max(0.0) + compensated_sum(&dropped),
            eigenvalues: self.eigenvalues[..m].to_vec(),
            log_eigenvalues: self.log_eigenvalues[..m].to_vec(),
            multi_indices: self.multi_indices[..m].to_vec(),
            beta: self.beta.clone(),
            gamma: self.gamma.clone(),
            operator_trace: self.operator_trace,
        }
    }
}

/// Neumaier summation.
fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// The `m` largest eigenvalues, in decreasing order (lexicographic ties).
pub fn continuous_spectrum(params: &KernelParams, m: usize) -> Result<Spectrum> {
    if m == 0 {
        return Err(Error::InvalidParams("spectrum size must be at least 1".into()));
    }
    let model = SpectrumModel::new(params)?;
    let items: Vec<_> = SpectrumEnumerator::new(model.clone()).take(m).collect();
    Ok(Spectrum::from_parts(&model, items))
}

/// Enumerates until the tail falls below `rel_tail · trace` or `cap` terms.
pub fn truncated_spectrum(params: &KernelParams, rel_tail: f64, cap: usize) -> Result<Spectrum> {
    let model = SpectrumModel::new(params)?;
    let trace = model.log_trace().exp();
    let mut items = Vec::new();
    let mut partial = 0.0;
    for item in SpectrumEnumerator::new(model.clone()) {
        partial += item.0.exp();
        items.push(item);
        if trace - partial < rel_tail * trace || items.len() >= cap {
            break;
        }
    }
    let spectrum = Spectrum::from_parts(&model, items);
    log::info!(
        "spectrum truncated at M={} (tail {:.3e}, {:.3e} of trace)",
        spectrum.len(),
        spectrum.tail(),
        spectrum.tail() / trace
    );
    Ok(spectrum)
}

#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + values.iter().map(|v| (v - hi).exp()).sum::<f64>().ln()
}

/// `ln e_j(λ_1, …, λ_M)` for `j = 0..=k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EspTable {
    pub log_values: Vec<f64>,
    pub m_used: usize,
    pub k: usize,
}

impl EspTable {
    pub fn log_e(&self, j: usize) -> f64 {
        self.log_values[j]
    }
}

/// Elementary symmetric polynomials by the one-pass recursion
/// `e_j ← e_j + λ_n e_{j−1}`, in log space. `O(M k)`.
pub fn esp(log_lambdas: &[f64], k: usize) -> EspTable {
    let mut table = vec![f64::NEG_INFINITY; k + 1];
    table[0] = 0.0;
    for (n, &log_lambda) in log_lambdas.iter().enumerate() {
        debug_assert!(!log_lambda.is_nan());
        let top = k.min(n + 1);
        for j in (1..=top).rev() {
            table[j] = log_add_exp(table[j], log_lambda + table[j - 1]);
        }
    }
    EspTable {
        log_values: table,
        m_used: log_lambdas.len(),
        k,
    }
}

/// Bracket on `ln e_k(λ_{1:∞})`.
///
/// `log_lower` is `−∞` when fewer than `k` eigenvalues were enumerated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerBound {
    pub log_lower: f64,
    pub log_upper: f64,
    pub m_used: usize,
}

fn log_factorials(k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for j in 1..=k {
        acc += (j as f64).ln();
        out.push(acc);
    }
    out
}

fn checked_tail(spectrum: &Spectrum) -> Result<f64> {
    let tail = spectrum.tail();
    if tail < -1e-9 * spectrum.operator_trace {
        return Err(Error::NegativeTail {
            tail,
            trace: spectrum.operator_trace,
        });
    }
    Ok(tail.max(0.0))
}

fn bounds_from_table(table: &EspTable, tail: f64, k: usize) -> NormalizerBound {
    let log_tail = tail.ln();
    let lf = log_factorials(k);
    let terms: Vec<f64> = (0..=k)
        .map(|j| {
            let lead = if j == 0 { 0.0 } else { j as f64 * log_tail - lf[j] };
            lead + table.log_e(k - j)
        })
        .collect();
    NormalizerBound {
        log_lower: table.log_e(k),
        log_upper: log_sum_exp(&terms),
        m_used: table.m_used,
    }
}

/// Lower and upper bounds on the k-DPP normaliser from a truncated spectrum.
pub fn normalizer_bounds(spectrum: &Spectrum, k: usize) -> Result<NormalizerBound> {
    let tail = checked_tail(spectrum)?;
    let table = esp(&spectrum.log_eigenvalues, k);
    Ok(bounds_from_table(&table, tail, k))
}

/// Truncation used for training normalisers.
pub const NORMALIZER_REL_TAIL: f64 = 1e-3;
pub const NORMALIZER_MAX_TERMS: usize = 10_000;

/// Per-cardinality normalisers for a fixed kernel.
///
/// The spectrum is enumerated once; the ESP table is extended lazily to the
/// largest cardinality requested so far. The upper bound is used as the
/// normaliser.
#[derive(Clone, Debug)]
pub struct NormalizerCache {
    params: KernelParams,
    spectrum: Spectrum,
    tail: f64,
    table: Option<EspTable>,
}

impl NormalizerCache {
    pub fn new(params: &KernelParams) -> Result<Self> {
        Self::with_truncation(params, NORMALIZER_REL_TAIL, NORMALIZER_MAX_TERMS)
    }

    pub fn with_truncation(params: &KernelParams, rel_tail: f64, cap: usize) -> Result<Self> {
        let spectrum = truncated_spectrum(params, rel_tail, cap)?;
        let tail = checked_tail(&spectrum)?;
        Ok(Self {
            params: params.clone(),
            spectrum,
            tail,
            table: None,
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn bounds(&mut self, k: usize) -> NormalizerBound {
        if self.table.as_ref().is_none_or(|t| t.k < k) {
            self.table = Some(esp(&self.spectrum.log_eigenvalues, k));
        }
        let table = self.table.as_ref().expect("table populated above");
        if table.k == k {
            bounds_from_table(table, self.tail, k)
        } else {
            let sub = EspTable {
                log_values: table.log_values[..=k].to_vec(),
                m_used: table.m_used,
                k,
            };
            bounds_from_table(&sub, self.tail, k)
        }
    }

    /// `ln e_k(λ_{1:∞})` approximated by its upper bound.
    pub fn log_normalizer(&mut self, k: usize) -> f64 {
        self.bounds(k).log_upper
    }
}
