#![allow(clippy::needless_range_loop)]

use dppvae_core::data::{make_blobs, simulate_trials, SpikeSimConfig};
use dppvae_core::eval::{
    audit_generated_balance, balanced_cv, fit_logit, fit_logit_fixed, wilson_interval, MetricsReport, WILSON_Z95,
};
use dppvae_core::linalg::Matrix;
use dppvae_core::models::{Likelihood, ModelConfig, Prior, VaeModel};

/// Binary logistic regression by Newton's method on standardised features,
/// penalising `l2/4 · ‖β‖²` (the two-class reduction of the symmetric
/// softmax penalty).
fn newton_binary(x: &Matrix, y: &[usize], l2: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, f) = x.shape();
    let mean: Vec<f64> = (0..f).map(|j| x.column(j).iter().sum::<f64>() / n as f64).collect();
    let sd: Vec<f64> = (0..f)
        .map(|j| (x.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt())
        .collect();
    let z = |i: usize| -> Vec<f64> {
        let mut r: Vec<f64> = (0..f).map(|j| (x.get(i, j) - mean[j]) / sd[j]).collect();
        r.push(1.0);
        r
    };
    let d = f + 1;
    let mut beta = vec![0.0; d];
    for _ in 0..50 {
        let mut g = vec![0.0; d];
        let mut h = vec![vec![0.0; d]; d];
        for i in 0..n {
            let zi = z(i);
            let eta: f64 = zi.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-eta).exp());
            let r = p - y[i] as f64;
            for a in 0..d {
                g[a] += r * zi[a] / n as f64;
                for b in 0..d {
                    h[a][b] += p * (1.0 - p) * zi[a] * zi[b] / n as f64;
                }
            }
        }
        for a in 0..f {
            g[a] += 0.5 * l2 * beta[a];
            h[a][a] += 0.5 * l2;
        }
        // Gaussian elimination
        let mut m: Vec<Vec<f64>> = h.iter().zip(&g).map(|(row, gi)| [row.clone(), vec![*gi]].concat()).collect();
        for c in 0..d {
            let piv = (c..d).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
            m.swap(c, piv);
            for r in 0..d {
                if r != c {
                    let factor = m[r][c] / m[c][c];
                    for k in c..=d {
                        m[r][k] -= factor * m[c][k];
                    }
                }
            }
        }
        for a in 0..d {
            beta[a] -= m[a][d] / m[a][a];
        }
    }
    (beta, mean, sd)
}

#[test]
fn two_class_logit_matches_newton_oracle() {
    let centers = vec![vec![0.8, 0.0, 1.0], vec![-0.8, 0.5, 1.0]];
    let ds = make_blobs(&[120, 80], &centers, 1.0, 17).unwrap();
    for l2 in [1e-2, 1e-1, 1.0] {
        let model = fit_logit_fixed(&ds.features, &ds.labels, 2, l2).unwrap();
        assert!(model.converged);
        let g = model.objective_gradient(&ds.features, &ds.labels).unwrap();
        assert!(g.data().iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
        let (beta, mean, sd) = newton_binary(&ds.features, &ds.labels, l2);
        let proba = model.predict_proba(&ds.features).unwrap();
        for i in 0..ds.len() {
            let mut eta = beta[3];
            for j in 0..3 {
                eta += beta[j] * (ds.features.get(i, j) - mean[j]) / sd[j];
            }
            let p = 1.0 / (1.0 + (-eta).exp());
            assert!((proba.get(i, 1) - p).abs() < 1e-5, "l2={l2} row {i}: {} vs {p}", proba.get(i, 1));
        }
    }
}

#[test]
fn metrics_from_hand_counted_confusion() {
    // rows: truth, columns: predicted
    let truth = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
    let pred = [0, 0, 1, 2, 1, 1, 0, 2, 2, 2];
    let r = MetricsReport::from_predictions(&truth, &pred, 3, None);
    assert_eq!(r.confusion, vec![vec![2, 1, 1], vec![1, 2, 0], vec![0, 0, 3]]);
    let expect = [(2.0 / 3.0, 0.5), (2.0 / 3.0, 2.0 / 3.0), (0.75, 1.0)];
    for (c, (p, rec)) in r.classes.iter().zip(expect) {
        assert!((c.precision - p).abs() < 1e-15);
        assert!((c.recall - rec).abs() < 1e-15);
        assert!((c.f1 - 2.0 * p * rec / (p + rec)).abs() < 1e-15);
    }
    assert!((r.accuracy - 0.7).abs() < 1e-15);
    let macro_f1 = r.classes.iter().map(|c| c.f1).sum::<f64>() / 3.0;
    assert!((r.macro_f1 - macro_f1).abs() < 1e-15);
}

#[test]
fn wilson_interval_known_value() {
    // p = 0.5, n = 10
    let (lo, hi) = wilson_interval(5, 10, WILSON_Z95);
    assert!((lo - 0.236_593_7).abs() < 1e-6, "{lo}");
    assert!((hi - 0.763_406_3).abs() < 1e-6, "{hi}");
}

#[test]
fn single_image_decoder_generates_one_class() {
    let centers = vec![vec![3.0, 0.0], vec![-3.0, 0.0]];
    let reference_set = make_blobs(&[200, 200], &centers, 0.5, 4).unwrap();
    let reference = fit_logit(&reference_set.features, &reference_set.labels, &[0.1], 0, 1).unwrap();
    let cfg = ModelConfig {
        data_dim: 2,
        latent_dim: 3,
        hidden: vec![4],
        likelihood: Likelihood::Gaussian,
        prior: Prior::StandardNormal,
    };
    let mut model = VaeModel::zeroed(&cfg).unwrap();
    model.decoder.layers.last_mut().unwrap().bias = Matrix::row_vector(&[-3.0, 0.2]);
    let (samples, audit) = audit_generated_balance(&model, 500, &reference, 9).unwrap();
    assert!(samples.data().chunks(2).all(|r| r == [-3.0, 0.2]));
    assert_eq!(audit.counts, vec![0, 500]);
    assert_eq!(audit.percentages, vec![0.0, 100.0]);
}

#[test]
fn balanced_cv_on_simulated_trial_counts() {
    let trials = simulate_trials(&SpikeSimConfig::default()).unwrap();
    let labels: Vec<usize> = trials.iter().map(|t| t.odor).collect();
    let folds = balanced_cv(&labels, 6, 4, 0).unwrap();
    assert_eq!(folds.len(), 6);
    let mut seen = vec![0usize; labels.len()];
    for f in &folds {
        assert_eq!(f.test.len(), 20);
        assert_eq!(f.train.len() + f.test.len(), labels.len());
        for c in 0..5 {
            assert_eq!(f.test.iter().filter(|&&i| labels[i] == c).count(), 4);
        }
        assert!(f.test.iter().all(|i| !f.train.contains(i)));
        f.test.iter().for_each(|&i| seen[i] += 1);
    }
    assert!(seen.iter().all(|&s| s <= 1));
}
