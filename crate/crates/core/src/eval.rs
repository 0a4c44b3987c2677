//! Downstream evaluation: multinomial logit classifiers, balanced
//! cross-validation, per-class metrics, generated-sample balance audits and
//! the latent replay export.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{apply_standardization, Standardization, TrialRecord, Window};
use crate::error::{Error, Result};
use crate::linalg::{pca_fit, Matrix, PcaModel};
use crate::models::{generate, VaeModel};
use crate::rng::SeedStreams;

pub const LOGIT_GRAD_TOL: f64 = 1e-6;
pub const LOGIT_MAX_ITER: usize = 10_000;
pub const DEFAULT_L2_GRID: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];
pub const DEFAULT_GRID_SIZE: usize = 200;

/// Multinomial logistic regression on standardised features. `weights` is
/// `n_classes × (n_features + 1)` with the bias in the last column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitModel {
    pub weights: Matrix,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub l2_penalty: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn with_bias(x: &Matrix) -> Matrix {
    let f = x.cols();
    Matrix::from_fn(x.rows(), f + 1, |i, j| if j < f { x.get(i, j) } else { 1.0 })
}

/// Column means and population standard deviations (1 for constant columns).
fn column_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    (0..x.cols())
        .map(|j| {
            let col = x.column(j);
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        })
        .unzip()
}

fn softmax_rows(z: &mut Matrix) {
    for i in 0..z.rows() {
        let row = z.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl LogitModel {
    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_features(&self) -> usize {
        self.weights.cols() - 1
    }

    fn design(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_features() {
            return Err(Error::ShapeMismatch {
                op: "logit",
                left: x.shape(),
                right: self.weights.shape(),
            });
        }
        let f = x.cols();
        Ok(Matrix::from_fn(x.rows(), f + 1, |i, j| {
            if j < f {
                (x.get(i, j) - self.feature_mean[j]) / self.feature_scale[j]
            } else {
                1.0
            }
        }))
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.design(x)?.matmul_t(&self.weights)
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = self.logits(x)?;
        softmax_rows(&mut z);
        Ok(z)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows()).map(|i| argmax(z.row(i))).collect())
    }

    pub fn predict_point(&self, point: &[f64]) -> usize {
        let scores: Vec<f64> = (0..self.n_classes())
            .map(|c| {
                let w = self.weights.row(c);
                let linear: f64 = (0..point.len())
                    .map(|j| w[j] * (point[j] - self.feature_mean[j]) / self.feature_scale[j])
                    .sum();
                linear + w[point.len()]
            })
            .collect();
        argmax(&scores)
    }

    /// Gradient of the training objective at the stored weights.
    pub fn objective_gradient(&self, features: &Matrix, labels: &[usize]) -> Result<Matrix> {
        let xb = self.design(features)?;
        Ok(logit_objective(&xb, labels, &self.weights, self.l2_penalty)?.1)
    }
}

/// Mean cross-entropy plus `(l2/2)·‖W‖²` over non-bias weights, and its
/// gradient.
fn logit_objective(xb: &Matrix, labels: &[usize], w: &Matrix, l2: f64) -> Result<(f64, Matrix)> {
    let n = xb.rows() as f64;
    let mut p = xb.matmul_t(w)?;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = p.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    softmax_rows(&mut p);
    for (i, &y) in labels.iter().enumerate() {
        p.row_mut(i)[y] -= 1.0;
    }
    let mut grad = p.t_matmul(xb)?.scale(1.0 / n);
    let bias = w.cols() - 1;
    let mut penalty = 0.0;
    for c in 0..w.rows() {
        for j in 0..bias {
            let v = w.get(c, j);
            penalty += v * v;
            grad.set(c, j, grad.get(c, j) + l2 * v);
        }
    }
    Ok((loss / n + 0.5 * l2 * penalty, grad))
}

fn logit_value(xb: &Matrix, labels: &[usize], w: &Matrix, l2: f64) -> Result<f64> {
    Ok(logit_objective(xb, labels, w, l2)?.0)
}

/// Largest eigenvalue of `XᵀX / n` by power iteration.
fn gram_spectral_radius(xb: &Matrix) -> f64 {
    let f = xb.cols();
    let mut v = vec![1.0 / (f as f64).sqrt(); f];
    let mut est = 0.0;
    for _ in 0..50 {
        let xv: Vec<f64> = (0..xb.rows()).map(|i| crate::linalg::dot(xb.row(i), &v)).collect();
        let mut w = vec![0.0; f];
        for (i, s) in xv.iter().enumerate() {
            for (wj, xj) in w.iter_mut().zip(xb.row(i)) {
                *wj += s * xj;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        est = norm / xb.rows() as f64;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    est
}

/// Fits a logit with a fixed penalty by accelerated gradient descent with
/// backtracking and adaptive restart. Features are standardised with their
/// own column statistics first, so the penalty is scale-free.
pub fn fit_logit_fixed(features: &Matrix, labels: &[usize], n_classes: usize, l2: f64) -> Result<LogitModel> {
    if features.rows() != labels.len() || features.rows() == 0 {
        return Err(Error::DimensionMismatch("logit features and labels differ in length".into()));
    }
    if !features.is_finite() {
        return Err(Error::DomainError("logit features must be finite".into()));
    }
    if labels.iter().any(|&l| l >= n_classes) {
        return Err(Error::DimensionMismatch("label outside class range".into()));
    }
    let (feature_mean, feature_scale) = column_stats(features);
    let standardized = Matrix::from_fn(features.rows(), features.cols(), |i, j| {
        (features.get(i, j) - feature_mean[j]) / feature_scale[j]
    });
    let xb = with_bias(&standardized);
    let mut lipschitz = (0.5 * gram_spectral_radius(&xb) + l2).max(1e-8);
    let mut w = Matrix::zeros(n_classes, xb.cols());
    let mut y = w.clone();
    let mut t = 1.0_f64;
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    while iterations < LOGIT_MAX_ITER {
        iterations += 1;
        let (fy, gy) = logit_objective(&xb, labels, &y, l2)?;
        grad_norm = gy.frobenius_norm();
        if grad_norm < LOGIT_GRAD_TOL {
            w = y;
            break;
        }
        let g_sq = grad_norm * grad_norm;
        let next = loop {
            let cand = y.sub(&gy.scale(1.0 / lipschitz))?;
            if logit_value(&xb, labels, &cand, l2)? <= fy - 0.5 * g_sq / lipschitz + 1e-15 * fy.abs() {
                break cand;
            }
            lipschitz *= 2.0;
        };
        let step = next.sub(&w)?;
        // restart momentum when the step opposes the gradient
        let restart = crate::linalg::dot(gy.data(), step.data()) > 0.0;
        if restart {
            t = 1.0;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = next.add(&step.scale((t - 1.0) / t_next))?;
        w = next;
        t = t_next;
        if iterations == LOGIT_MAX_ITER {
            grad_norm = logit_objective(&xb, labels, &w, l2)?.1.frobenius_norm();
        }
    }
    let converged = grad_norm < LOGIT_GRAD_TOL;
    if !converged {
        log::warn!("logit stopped after {iterations} iterations with gradient norm {grad_norm:.3e}");
    }
    Ok(LogitModel {
        weights: w,
        feature_mean,
        feature_scale,
        l2_penalty: l2,
        converged,
        iterations,
        grad_norm,
    })
}

fn stratified_folds(labels: &[usize], n_classes: usize, k: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    let mut fold_of = vec![0; labels.len()];
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        for (pos, i) in idx.into_iter().enumerate() {
            fold_of[i] = pos % k;
        }
    }
    fold_of
}

fn fit_logit_classes(
    features: &Matrix,
    labels: &[usize],
    n_classes: usize,
    l2_grid: &[f64],
    cv_folds: usize,
    seed: u64,
) -> Result<LogitModel> {
    let mut present = vec![false; n_classes];
    labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::SingleClass);
    }
    if l2_grid.is_empty() || l2_grid.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidConfig("l2 grid needs non-negative finite values".into()));
    }
    let mut best = l2_grid[0];
    if l2_grid.len() > 1 && cv_folds >= 2 {
        let mut rng = SeedStreams::new(seed).rng("logit_cv");
        let fold_of = stratified_folds(labels, n_classes, cv_folds, &mut rng);
        let mut best_score = f64::NEG_INFINITY;
        for &l2 in l2_grid {
            let mut confusion = vec![vec![0usize; n_classes]; n_classes];
            for f in 0..cv_folds {
                let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
                let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
                if test.is_empty() || train.is_empty() {
                    continue;
                }
                let tl: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
                let m = fit_logit_fixed(&features.select_rows(&train), &tl, n_classes, l2)?;
                for (&i, p) in test.iter().zip(m.predict(&features.select_rows(&test))?) {
                    confusion[labels[i]][p] += 1;
                }
            }
            let score = MetricsReport::from_confusion(confusion, None).macro_f1;
            if score > best_score {
                best_score = score;
                best = l2;
            }
        }
    }
    fit_logit_fixed(features, labels, n_classes, best)
}

/// Fits a multinomial logit, choosing the penalty from `l2_grid` by inner
/// stratified CV macro-F1 (first grid value wins ties). Classes are
/// `0..=max(label)`.
pub fn fit_logit(features: &Matrix, labels: &[usize], l2_grid: &[f64], cv_folds: usize, seed: u64) -> Result<LogitModel> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    fit_logit_classes(features, labels, n_classes, l2_grid, cv_folds, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub folds: Vec<Fold>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<usize>>, names: Option<&[String]>) -> Self {
        let k = confusion.len();
        let mut classes = Vec::with_capacity(k);
        let mut correct = 0;
        let mut total = 0;
        for c in 0..k {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            correct += tp;
            total += support;
            classes.push(ClassMetrics {
                name: names.and_then(|n| n.get(c).cloned()).unwrap_or_else(|| c.to_string()),
                precision,
                recall,
                f1,
                support,
            });
        }
        let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / k.max(1) as f64;
        Self {
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            accuracy: ratio(correct, total),
            classes,
            confusion,
            folds: Vec::new(),
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize, names: Option<&[String]>) -> Self {
        let mut confusion = vec![vec![0; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion, names)
    }

    /// Per-class rows followed by an `avg` row of macro averages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for c in &self.classes {
            let _ = writeln!(out, "{},{:?},{:?},{:?},{}", c.name, c.precision, c.recall, c.f1, c.support);
        }
        let total: usize = self.classes.iter().map(|c| c.support).sum();
        let _ = writeln!(
            out,
            "avg,{:?},{:?},{:?},{}",
            self.macro_precision, self.macro_recall, self.macro_f1, total
        );
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores `model` on a labelled set.
pub fn evaluate(model: &LogitModel, features: &Matrix, labels: &[usize]) -> Result<MetricsReport> {
    let predicted = model.predict(features)?;
    Ok(MetricsReport::from_predictions(labels, &predicted, model.n_classes(), None))
}

/// Balanced test folds: each fold holds `per_class_test` items of every
/// class, drawn without replacement; everything else trains.
pub fn balanced_cv(labels: &[usize], n_folds: usize, per_class_test: usize, seed: u64) -> Result<Vec<Fold>> {
    if n_folds == 0 || per_class_test == 0 {
        return Err(Error::InvalidConfig("folds and per-class test size must be positive".into()));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let min_count = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let mut per = per_class_test;
    if min_count < n_folds * per {
        per = min_count / n_folds;
        if per == 0 {
            return Err(Error::TooFewSamples(format!(
                "smallest class has {min_count} items for {n_folds} folds"
            )));
        }
        log::warn!("per-class test size reduced from {per_class_test} to {per}");
    }
    let mut rng = SeedStreams::new(seed).rng("cv");
    let mut tests = vec![Vec::new(); n_folds];
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
        for (f, test) in tests.iter_mut().enumerate() {
            test.extend_from_slice(&idx[f * per..(f + 1) * per]);
        }
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..labels.len()).filter(|i| test.binary_search(i).is_err()).collect();
            Fold { train, test }
        })
        .collect())
}

/// Fits a logit per fold and pools test predictions into one report.
pub fn cross_validate(
    features: &Matrix,
    labels: &[usize],
    class_names: &[String],
    folds: &[Fold],
    l2_grid: &[f64],
    inner_folds: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let n_classes = class_names.len();
    let streams = SeedStreams::new(seed);
    let mut confusion = vec![vec![0; n_classes]; n_classes];
    for (f, fold) in folds.iter().enumerate() {
        let tl: Vec<usize> = fold.train.iter().map(|&i| labels[i]).collect();
        let model = fit_logit_classes(
            &features.select_rows(&fold.train),
            &tl,
            n_classes,
            l2_grid,
            inner_folds,
            streams.derive(&format!("fold{f}")),
        )?;
        for (&i, p) in fold.test.iter().zip(model.predict(&features.select_rows(&fold.test))?) {
            confusion[labels[i]][p] += 1;
        }
    }
    let mut report = MetricsReport::from_confusion(confusion, Some(class_names));
    report.folds = folds.to_vec();
    Ok(report)
}

/// Encoder means as deterministic features.
pub fn latent_features(model: &VaeModel, x: &Matrix) -> Result<Matrix> {
    Ok(model.encode(x)?.mu)
}

pub const WILSON_Z95: f64 = 1.959_963_984_540_054;

/// Class shares of a labelled sample with Wilson 95% intervals, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceAudit {
    pub n_samples: usize,
    pub counts: Vec<usize>,
    pub percentages: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
}

pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

impl BalanceAudit {
    pub fn from_predictions(predicted: &[usize], n_classes: usize) -> Self {
        let mut counts = vec![0; n_classes];
        predicted.iter().for_each(|&p| counts[p] += 1);
        let n = predicted.len();
        let mut out = Self {
            n_samples: n,
            counts: counts.clone(),
            percentages: Vec::new(),
            ci_low: Vec::new(),
            ci_high: Vec::new(),
        };
        for c in counts {
            let (lo, hi) = wilson_interval(c, n, WILSON_Z95);
            out.percentages.push(100.0 * ratio(c, n));
            out.ci_low.push(100.0 * lo);
            out.ci_high.push(100.0 * hi);
        }
        out
    }
}

pub fn audit_samples(samples: &Matrix, reference: &LogitModel) -> Result<BalanceAudit> {
    let predicted = reference.predict(samples)?;
    Ok(BalanceAudit::from_predictions(&predicted, reference.n_classes()))
}

/// Decodes `n_samples` prior draws from the `"generation"` substream of
/// `seed` and labels them with `reference`. Equal seeds and latent sizes
/// give identical draws across models.
pub fn audit_generated_balance(
    model: &VaeModel,
    n_samples: usize,
    reference: &LogitModel,
    seed: u64,
) -> Result<(Matrix, BalanceAudit)> {
    let mut rng = SeedStreams::new(seed).rng("generation");
    let samples = generate(model, n_samples, &mut rng)?;
    let audit = audit_samples(&samples, reference)?;
    Ok((samples, audit))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayPoint {
    pub trial_id: usize,
    pub odor: usize,
    pub x: f64,
    pub y: f64,
    /// Decision region containing the point.
    pub region: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BoundingBox {
    fn around(points: &Matrix, pad: f64) -> Self {
        let xs = points.column(0);
        let ys = points.column(1);
        let lo = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (x0, x1, y0, y1) = (lo(&xs), hi(&xs), lo(&ys), hi(&ys));
        let px = pad * (x1 - x0).max(1e-12);
        let py = pad * (y1 - y0).max(1e-12);
        Self {
            x_min: x0 - px,
            x_max: x1 + px,
            y_min: y0 - py,
            y_max: y1 + py,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    /// Centre of grid cell `(row, col)`; rows run along y.
    pub fn cell_center(&self, grid: usize, row: usize, col: usize) -> (f64, f64) {
        let dx = (self.x_max - self.x_min) / grid as f64;
        let dy = (self.y_max - self.y_min) / grid as f64;
        (self.x_min + (col as f64 + 0.5) * dx, self.y_min + (row as f64 + 0.5) * dy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayFrame {
    pub window: Window,
    pub bbox: BoundingBox,
    pub grid_size: usize,
    /// `region_grid[row][col]`, rows along y.
    pub region_grid: Vec<Vec<u8>>,
    pub points: Vec<ReplayPoint>,
    /// Fraction of all plotted trials per region.
    pub class_occupancy: Vec<f64>,
    /// `occupancy_by_class[true][region]`
    pub occupancy_by_class: Vec<Vec<f64>>,
}

impl ReplayFrame {
    pub fn occupancy_for(&self, true_class: usize) -> &[f64] {
        &self.occupancy_by_class[true_class]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayExport {
    pub train_window: Window,
    pub pca: PcaModel,
    pub logit: LogitModel,
    pub frames: Vec<ReplayFrame>,
}

fn region_grid(logit: &LogitModel, bbox: &BoundingBox, grid: usize) -> Vec<Vec<u8>> {
    (0..grid)
        .map(|r| {
            (0..grid)
                .map(|c| {
                    let (x, y) = bbox.cell_center(grid, r, c);
                    logit.predict_point(&[x, y]) as u8
                })
                .collect()
        })
        .collect()
}

/// Projects every window's latent means into the plane fitted on the
/// training window and labels them with a logit fitted there.
pub fn replay_export(
    model: &VaeModel,
    trials: &[TrialRecord],
    stats: &Standardization,
    windows: &[Window],
    grid_size: usize,
    seed: u64,
) -> Result<ReplayExport> {
    if grid_size == 0 {
        return Err(Error::InvalidConfig("grid_size must be positive".into()));
    }
    let train = apply_standardization(trials, stats.window, stats)?;
    let n_classes = train.n_classes();
    let train_latent = latent_features(model, &train.features)?;
    let pca = pca_fit(&train_latent, 2)?;
    let train_proj = pca.transform(&train_latent)?;
    let logit = fit_logit_classes(&train_proj, &train.labels, n_classes, &[1e-3, 1e-2, 1e-1], 5, seed)?;
    let bbox = BoundingBox::around(&train_proj, 0.1);
    let grid = region_grid(&logit, &bbox, grid_size);

    let mut frames = Vec::with_capacity(windows.len());
    for &window in windows {
        let ds = apply_standardization(trials, window, stats)?;
        let proj = pca.transform(&latent_features(model, &ds.features)?)?;
        let mut counts = vec![vec![0usize; n_classes]; n_classes];
        let mut points = Vec::with_capacity(trials.len());
        for (i, t) in trials.iter().enumerate() {
            let (x, y) = (proj.get(i, 0), proj.get(i, 1));
            let region = logit.predict_point(&[x, y]);
            counts[t.odor][region] += 1;
            points.push(ReplayPoint {
                trial_id: t.trial_id,
                odor: t.odor,
                x,
                y,
                region,
            });
        }
        let n = points.len();
        let class_occupancy = (0..n_classes)
            .map(|r| ratio(counts.iter().map(|row| row[r]).sum(), n))
            .collect();
        let occupancy_by_class = counts
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                row.iter().map(|&c| ratio(c, total)).collect()
            })
            .collect();
        frames.push(ReplayFrame {
            window,
            bbox,
            grid_size,
            region_grid: grid.clone(),
            points,
            class_occupancy,
            occupancy_by_class,
        });
    }
    Ok(ReplayExport {
        train_window: stats.window,
        pca,
        logit,
        frames,
    })
}

pub fn write_frames_jsonl<W: Write>(frames: &[ReplayFrame], mut out: W) -> Result<()> {
    for f in frames {
        serde_json::to_writer(&mut out, f)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_frames_jsonl<R: BufRead>(input: R) -> Result<Vec<ReplayFrame>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#b07aa1", "#76b7b2", "#edc948", "#9c755f",
];
const REGION_TINT: [&str; 8] = [
    "#dbe4ee", "#fce4cc", "#deecdb", "#f8dcdd", "#ece2ea", "#e3f0ef", "#fbf3d6", "#ebe3de",
];

/// Region raster with trials coloured by true class.
pub fn render_frame_svg(frame: &ReplayFrame, class_names: &[String]) -> String {
    let size = 400.0;
    let g = frame.grid_size as f64;
    let cell = size / g;
    let b = frame.bbox;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{}\" viewBox=\"0 0 {size} {}\">\n",
        size + 40.0,
        size + 40.0
    );
    for (r, row) in frame.region_grid.iter().enumerate() {
        // run-length encode each raster row
        let y = size - (r as f64 + 1.0) * cell;
        let mut start = 0;
        for c in 1..=row.len() {
            if c == row.len() || row[c] != row[start] {
                let _ = writeln!(
                    svg,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                    start as f64 * cell,
                    y,
                    (c - start) as f64 * cell + 0.01,
                    cell + 0.01,
                    REGION_TINT[row[start] as usize % REGION_TINT.len()]
                );
                start = c;
            }
        }
    }
    for p in &frame.points {
        if !b.contains(p.x, p.y) {
            continue;
        }
        let sx = (p.x - b.x_min) / (b.x_max - b.x_min) * size;
        let sy = size - (p.y - b.y_min) / (b.y_max - b.y_min) * size;
        let _ = writeln!(
            svg,
            "<circle cx=\"{sx:.2}\" cy=\"{sy:.2}\" r=\"3\" fill=\"{}\"/>",
            PALETTE[p.odor % PALETTE.len()]
        );
    }
    let legend: Vec<String> = class_names
        .iter()
        .enumerate()
        .map(|(c, n)| {
            format!(
                "<tspan fill=\"{}\">{} {:.2}</tspan>",
                PALETTE[c % PALETTE.len()],
                n,
                frame.class_occupancy.get(c).copied().unwrap_or(0.0)
            )
        })
        .collect();
    let _ = writeln!(
        svg,
        "<text x=\"4\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">{} {}</text>",
        size + 25.0,
        frame.window.label(),
        legend.join(" ")
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;

    fn blobs(seed: u64) -> (Matrix, Vec<usize>) {
        let ds = make_blobs(&[60, 60], &[vec![3.0, 0.0], vec![-3.0, 0.0]], 0.5, seed).unwrap();
        (ds.features, ds.labels)
    }

    #[test]
    fn separable_blobs_fit_perfectly() {
        let (x, y) = blobs(1);
        let m = fit_logit(&x, &y, &DEFAULT_L2_GRID, 3, 0).unwrap();
        assert_eq!(m.predict(&x).unwrap(), y);
        assert!(m.converged);
        assert!(m.objective_gradient(&x, &y).unwrap().frobenius_norm() < LOGIT_GRAD_TOL);
        let p = m.predict_proba(&x).unwrap();
        for i in 0..p.rows() {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Matrix::from_fn(4, 2, |i, j| (i + j) as f64);
        assert!(matches!(fit_logit(&x, &[1, 1, 1, 1], &[0.1], 2, 0), Err(Error::SingleClass)));
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let (x, y) = blobs(2);
        let a = fit_logit(&x, &y, &DEFAULT_L2_GRID, 4, 9).unwrap();
        let b = fit_logit(&x, &y, &DEFAULT_L2_GRID, 4, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn metrics_examples() {
        let perfect = MetricsReport::from_predictions(&[0, 1, 1, 0], &[0, 1, 1, 0], 2, None);
        assert_eq!(perfect.macro_f1, 1.0);
        assert_eq!(perfect.accuracy, 1.0);
        let all_zero = MetricsReport::from_predictions(&[0, 0, 1, 1], &[0, 0, 0, 0], 2, None);
        assert_eq!(all_zero.classes[0].recall, 1.0);
        assert_eq!(all_zero.classes[0].precision, 0.5);
        assert_eq!(all_zero.classes[1].precision, 0.0);
        assert_eq!(all_zero.classes[1].recall, 0.0);
        assert_eq!(all_zero.classes[1].f1, 0.0);
        let mean_f1 = all_zero.classes.iter().map(|c| c.f1).sum::<f64>() / 2.0;
        assert!((all_zero.macro_f1 - mean_f1).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let names: Vec<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        let r = MetricsReport::from_predictions(&[0, 1], &[0, 1], 2, Some(&names));
        let csv = r.to_csv();
        let rows: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(rows, vec!["class", "A", "B", "avg"]);
    }

    #[test]
    fn balanced_cv_reference_layout() {
        let counts = [58, 41, 37, 32, 26];
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| vec![c; n]).collect();
        let folds = balanced_cv(&labels, 6, 4, 3).unwrap();
        assert_eq!(folds.len(), 6);
        let mut seen = std::collections::HashSet::new();
        for f in &folds {
            assert_eq!(f.test.len(), 20);
            for c in 0..5 {
                assert_eq!(f.test.iter().filter(|&&i| labels[i] == c).count(), 4);
            }
            for i in &f.test {
                assert!(seen.insert(*i), "index {i} in two test folds");
                assert!(!f.train.contains(i));
            }
            assert_eq!(f.train.len() + f.test.len(), labels.len());
        }
        for c in 0..5 {
            assert_eq!(seen.iter().filter(|&&i| labels[i] == c).count(), 24);
        }
        assert_eq!(balanced_cv(&labels, 6, 4, 3).unwrap(), folds);
    }

    #[test]
    fn balanced_cv_shrinks_or_fails() {
        let labels = vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        let folds = balanced_cv(&labels, 2, 3, 0).unwrap();
        assert!(folds.iter().all(|f| f.test.len() == 4));
        assert!(matches!(balanced_cv(&[0, 1, 1], 2, 1, 0), Err(Error::TooFewSamples(_))));
    }

    #[test]
    fn wilson_matches_closed_form() {
        let (lo, hi) = wilson_interval(50, 100, WILSON_Z95);
        assert!((lo - 0.403_831).abs() < 1e-5 && (hi - 0.596_169).abs() < 1e-5);
        let (lo, hi) = wilson_interval(0, 10, WILSON_Z95);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.277_532).abs() < 1e-5);
        let audit = BalanceAudit::from_predictions(&[0, 0, 1, 0], 2);
        assert!((audit.percentages.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn frames_round_trip() {
        let frame = ReplayFrame {
            window: Window::new(0.15, 0.4),
            bbox: BoundingBox {
                x_min: -1.0,
                x_max: 1.0,
                y_min: -0.5,
                y_max: 0.5,
            },
            grid_size: 2,
            region_grid: vec![vec![0, 1], vec![1, 1]],
            points: vec![ReplayPoint {
                trial_id: 3,
                odor: 1,
                x: 0.1 + 0.2,
                y: -1.0 / 3.0,
                region: 1,
            }],
            class_occupancy: vec![0.0, 1.0],
            occupancy_by_class: vec![vec![0.0, 0.0], vec![0.0, 1.0]],
        };
        let mut buf = Vec::new();
        write_frames_jsonl(std::slice::from_ref(&frame), &mut buf).unwrap();
        assert_eq!(read_frames_jsonl(&buf[..]).unwrap(), vec![frame.clone()]);
        let svg = render_frame_svg(&frame, &["A".into(), "B".into()]);
        assert!(svg.starts_with("<svg") && svg.contains("<circle"));
    }
}
