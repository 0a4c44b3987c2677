#![allow(clippy::needless_range_loop)]

use dppvae_core::dpp::{continuous_spectrum, esp, normalizer_bounds, KernelParams, SpectrumModel};
use dppvae_core::linalg::{eigh, log_det_spd, Matrix};
use dppvae_core::oracle::{det_cofactor, esp_bruteforce, lattice_bruteforce, nystrom_eigenvalues, quality_squared_integral};
use proptest::prelude::*;

fn spd(n: usize, entries: &[f64]) -> Matrix {
    let g = Matrix::new(n, n, entries[..n * n].to_vec()).unwrap();
    g.t_matmul(&g).unwrap().add_diagonal(0.5).symmetrize()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn esp_matches_subset_enumeration(exps in prop::collection::vec(-6.0f64..3.0, 1..=12)) {
        let lambdas: Vec<f64> = exps.iter().map(|e| 10f64.powf(*e)).collect();
        let logs: Vec<f64> = lambdas.iter().map(|l| l.ln()).collect();
        let table = esp(&logs, lambdas.len());
        for k in 0..=lambdas.len() {
            let exact = esp_bruteforce(&lambdas, k);
            let rel = (table.log_e(k).exp() - exact).abs() / exact;
            prop_assert!(rel < 1e-10, "k={} rel={}", k, rel);
        }
    }

    #[test]
    fn esp_ignores_input_order(exps in prop::collection::vec(-3.0f64..2.0, 2..=10), k in 0usize..6) {
        let logs: Vec<f64> = exps.iter().map(|e| e * std::f64::consts::LN_10).collect();
        let mut rev = logs.clone();
        rev.reverse();
        let (a, b) = (esp(&logs, k).log_e(k), esp(&rev, k).log_e(k));
        prop_assert!(a == b || (a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn log_det_matches_cofactor_expansion(n in 1usize..=6, entries in prop::collection::vec(-2.0f64..2.0, 36)) {
        let a = spd(n, &entries);
        let exact = det_cofactor(&a);
        let fast = log_det_spd(&a).unwrap();
        prop_assert!((fast - exact.ln()).abs() < 1e-9, "{} vs {}", fast, exact.ln());
    }

    #[test]
    fn eigh_reconstructs_and_is_orthonormal(n in 1usize..=7, entries in prop::collection::vec(-2.0f64..2.0, 49)) {
        let a = spd(n, &entries);
        let e = eigh(&a).unwrap();
        let v = &e.vectors;
        let rebuilt = v.matmul(&Matrix::from_diag(&e.values)).unwrap().matmul_t(v).unwrap();
        let scale = a.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for (x, y) in rebuilt.data().iter().zip(a.data()) {
            prop_assert!((x - y).abs() < 1e-9 * scale);
        }
        let gram = v.t_matmul(v).unwrap();
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram.get(i, j) - target).abs() < 1e-10);
            }
        }
        prop_assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        let prod: f64 = e.values.iter().product();
        prop_assert!((prod / det_cofactor(&a) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn one_dim_spectrum_matches_nystrom(alpha in 0.5f64..2000.0, rho in 0.3f64..3.0, sigma in 0.3f64..3.0) {
        let p = KernelParams::isotropic(alpha, rho, sigma, 1).unwrap();
        let analytic = continuous_spectrum(&p, 5).unwrap();
        let half = 10.0 * rho.max(sigma).sqrt().max(1.0);
        let numeric = nystrom_eigenvalues(&p, 400, half).unwrap();
        let lead = analytic.eigenvalues[0];
        for (a, n) in analytic.eigenvalues.iter().zip(&numeric).take_while(|(a, _)| **a > 1e-8 * lead) {
            prop_assert!((a - n).abs() / a < 0.01, "{} vs {}", a, n);
        }
    }

    #[test]
    fn heap_order_matches_sorted_lattice(
        alpha in 0.5f64..100.0,
        rho in prop::collection::vec(0.3f64..3.0, 3),
        sigma in prop::collection::vec(0.3f64..3.0, 3),
    ) {
        let p = KernelParams::new(alpha, rho, sigma).unwrap();
        let heap = continuous_spectrum(&p, 60).unwrap();
        let slowest = SpectrumModel::new(&p).unwrap().dims.iter().map(|d| d.log_ratio).fold(f64::NEG_INFINITY, f64::max);
        let depth = (heap.eigenvalues[59] / heap.eigenvalues[0]).ln() / slowest;
        let brute = lattice_bruteforce(&p, depth.ceil() as u32 + 2).unwrap();
        for i in 0..60 {
            prop_assert!((heap.eigenvalues[i] - brute[i].0).abs() <= 1e-12 * brute[i].0);
        }
    }

    #[test]
    fn bounds_bracket_a_longer_truncation(
        alpha in 1.0f64..1000.0,
        rho in 0.3f64..3.0,
        sigma in 0.3f64..3.0,
        k in 1usize..20,
    ) {
        let p = KernelParams::isotropic(alpha, rho, sigma, 2).unwrap();
        let long = continuous_spectrum(&p, 20 * k).unwrap();
        let reference = normalizer_bounds(&long, k).unwrap().log_lower;
        let short = normalizer_bounds(&long.truncate(2 * k), k).unwrap();
        let slack = 1e-12 * reference.abs().max(1.0);
        prop_assert!(short.log_lower <= reference + slack);
        prop_assert!(reference <= short.log_upper + slack);
    }
}

#[test]
fn operator_trace_equals_integral_of_squared_quality() {
    for p in [
        KernelParams::isotropic(1.0, 1.0, 1.0, 1).unwrap(),
        KernelParams::isotropic(1000.0, 2.0, 0.5, 1).unwrap(),
        KernelParams::new(3.0, vec![0.7, 1.8], vec![1.0, 0.4]).unwrap(),
    ] {
        let trace = continuous_spectrum(&p, 1).unwrap().operator_trace;
        let integral = quality_squared_integral(&p, 801, 12.0);
        assert!((trace / integral - 1.0).abs() < 1e-8, "{trace} vs {integral}");
    }
}

#[test]
fn nystrom_reference_configs_top_ten() {
    for (alpha, rho, sigma) in [(1.0, 1.0, 1.0), (1000.0, 1.0, 1.0), (1.0, 2.0, 0.5)] {
        let p = KernelParams::isotropic(alpha, rho, sigma, 1).unwrap();
        let analytic = continuous_spectrum(&p, 10).unwrap();
        let numeric = nystrom_eigenvalues(&p, 400, 10.0 * sigma).unwrap();
        for (a, n) in analytic.eigenvalues.iter().zip(&numeric) {
            assert!((a - n).abs() / a < 0.01, "({alpha},{rho},{sigma}): {a} vs {n}");
        }
    }
}

#[test]
fn nested_truncations_have_monotone_bounds() {
    let p = KernelParams::isotropic(1000.0, 1.0, 1.0, 2).unwrap();
    for k in [3, 10, 100] {
        let full = continuous_spectrum(&p, 10 * k).unwrap();
        let mut prev: Option<(f64, f64)> = None;
        for m in [k, 2 * k, 3 * k, 5 * k, 10 * k] {
            let b = normalizer_bounds(&full.truncate(m), k).unwrap();
            assert!(b.log_lower <= b.log_upper);
            if let Some((lo, up)) = prev {
                assert!(b.log_lower >= lo, "k={k} M={m}: lower decreased");
                assert!(b.log_upper <= up, "k={k} M={m}: upper increased");
            }
            prev = Some((b.log_lower, b.log_upper));
        }
    }
}

#[test]
fn nystrom_with_clustered_tiny_eigenvalues() {
    let p = KernelParams::isotropic(0.5, 2.3699506017142973, 0.3, 1).unwrap();
    let analytic = continuous_spectrum(&p, 3).unwrap();
    let numeric = nystrom_eigenvalues(&p, 400, 10.0 * 2.3699506017142973f64.sqrt()).unwrap();
    for (a, n) in analytic.eigenvalues.iter().zip(&numeric) {
        assert!((a - n).abs() / a < 0.01, "{a} vs {n}");
    }
}
