//! Oracle suite: fast routines checked against slow independent references.

use std::fmt;

use dppvae_core::autodiff::{grad_check, Tape, Var};
use dppvae_core::dpp::{continuous_spectrum, esp, normalizer_bounds, KernelParams};
use dppvae_core::models::{param_gradient_error, standard_normal, Likelihood, ModelConfig, Prior, VaeModel};
use dppvae_core::oracle::{esp_bruteforce, lattice_bruteforce, nystrom_eigenvalues};
use dppvae_core::rng::rng_from_seed;
use dppvae_core::{Matrix, Result};
use rand::Rng;

pub const ESP_TOL: f64 = 1e-10;
pub const OP_GRAD_TOL: f64 = 1e-6;
pub const LOGDET_GRAD_TOL: f64 = 1e-5;
pub const END_TO_END_GRAD_TOL: f64 = 1e-4;
pub const NYSTROM_TOL: f64 = 0.01;
pub const NYSTROM_NODES: usize = 400;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub tolerance: f64,
    pub observed: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `observed ≤ tolerance` (and is not NaN).
    pub fn within(name: impl Into<String>, tolerance: f64, observed: f64) -> Self {
        Self {
            name: name.into(),
            tolerance,
            observed,
            passed: observed <= tolerance,
        }
    }

    fn failed(name: impl Into<String>, tolerance: f64, err: impl fmt::Display) -> Self {
        let name = name.into();
        log::error!("{name}: {err}");
        Self {
            name,
            tolerance,
            observed: f64::NAN,
            passed: false,
        }
    }

    fn from_result(name: &str, tolerance: f64, r: Result<f64>) -> Self {
        match r {
            Ok(v) => Self::within(name, tolerance, v),
            Err(e) => Self::failed(name, tolerance, e),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<44} tol {:<10.3e} observed {:<12.3e} {}",
            self.name,
            self.tolerance,
            self.observed,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Worst relative error of the log-space ESP recursion against subset
/// enumeration, over `trials` random vectors of length 1..=12 with values
/// log-uniform on `[1e-6, 1e3]`, for every `k`.
///
/// `perturb` scales the first λ by `1 + perturb` before the fast path only.
pub fn esp_check(trials: usize, seed: u64, perturb: Option<f64>) -> Check {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.gen_range(1..=12);
        let lambdas: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.gen_range(-6.0..=3.0))).collect();
        let mut fast_input = lambdas.clone();
        if let Some(p) = perturb {
            fast_input[0] *= 1.0 + p;
        }
        let logs: Vec<f64> = fast_input.iter().map(|l| l.ln()).collect();
        let table = esp(&logs, n);
        for k in 0..=n {
            let exact = esp_bruteforce(&lambdas, k);
            let fast = table.log_e(k).exp();
            worst = worst.max((fast - exact).abs() / exact);
        }
    }
    Check::within(format!("esp vs subset enumeration ({trials} vectors)"), ESP_TOL, worst)
}

fn randn(rows: usize, cols: usize, seed: u64) -> Matrix {
    standard_normal(rows, cols, &mut rng_from_seed(seed))
}

/// Reduces a node to a scalar through fixed random weights so every entry
/// of its gradient is exercised.
fn weighted_sum(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.value(v).shape();
    let w = t.constant(randn(r, c, seed));
    let m = t.mul(v, w)?;
    Ok(t.sum(m))
}

type OpFn = fn(&mut Tape, Var) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, OpFn)> {
    vec![
        ("matmul", |t, x| {
            let b = t.constant(randn(3, 2, 901));
            let a = t.constant(randn(2, 4, 902));
            let left = t.matmul(x, b)?;
            let right = t.matmul(a, x)?;
            let s1 = weighted_sum(t, left, 1)?;
            let s2 = weighted_sum(t, right, 2)?;
            t.add(s1, s2)
        }),
        ("transpose", |t, x| {
            let y = t.transpose(x);
            weighted_sum(t, y, 3)
        }),
        ("add", |t, x| {
            let c = t.constant(randn(4, 3, 903));
            let y = t.add(x, c)?;
            let y = t.add(y, x)?;
            weighted_sum(t, y, 4)
        }),
        ("sub", |t, x| {
            let c = t.constant(randn(4, 3, 904));
            let y = t.sub(c, x)?;
            weighted_sum(t, y, 5)
        }),
        ("mul", |t, x| {
            let y = t.mul(x, x)?;
            weighted_sum(t, y, 6)
        }),
        ("scale", |t, x| {
            let y = t.scale(x, -2.5);
            weighted_sum(t, y, 7)
        }),
        ("add_scalar", |t, x| {
            let y = t.add_scalar(x, 0.7);
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 8)
        }),
        ("exp", |t, x| {
            let y = t.exp(x);
            weighted_sum(t, y, 9)
        }),
        ("log", |t, x| {
            let y = t.square(x);
            let y = t.add_scalar(y, 0.5);
            let y = t.log(y);
            weighted_sum(t, y, 10)
        }),
        ("square", |t, x| {
            let y = t.square(x);
            weighted_sum(t, y, 11)
        }),
        ("neg", |t, x| {
            let y = t.neg(x);
            weighted_sum(t, y, 12)
        }),
        ("relu", |t, x| {
            let y = t.relu(x);
            let y = t.mul(y, x)?;
            weighted_sum(t, y, 13)
        }),
        ("sigmoid", |t, x| {
            let y = t.sigmoid(x);
            weighted_sum(t, y, 14)
        }),
        ("softplus", |t, x| {
            let y = t.softplus(x);
            weighted_sum(t, y, 15)
        }),
        ("clamp", |t, x| {
            let y = t.clamp(x, -0.9, 0.9);
            let y = t.mul(y, x)?;
            weighted_sum(t, y, 16)
        }),
        ("sum", |t, x| {
            let y = t.square(x);
            Ok(t.sum(y))
        }),
        ("mean", |t, x| {
            let y = t.exp(x);
            Ok(t.mean(y))
        }),
        ("row_sum", |t, x| {
            let y = t.row_sum(x);
            let y = t.square(y);
            weighted_sum(t, y, 17)
        }),
        ("broadcast_row", |t, x| {
            let r = t.slice_rows(x, 0, 1)?;
            let y = t.broadcast_row(r, 5)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 18)
        }),
        ("broadcast_col", |t, x| {
            let c = t.slice_cols(x, 1, 2)?;
            let y = t.broadcast_col(c, 4)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 19)
        }),
        ("slice_rows", |t, x| {
            let y = t.slice_rows(x, 1, 3)?;
            let y = t.square(y);
            weighted_sum(t, y, 20)
        }),
        ("slice_cols", |t, x| {
            let y = t.slice_cols(x, 0, 2)?;
            let y = t.exp(y);
            weighted_sum(t, y, 21)
        }),
        ("concat_rows", |t, x| {
            let a = t.slice_rows(x, 2, 4)?;
            let b = t.square(x);
            let y = t.concat_rows(&[a, b, x])?;
            weighted_sum(t, y, 22)
        }),
    ]
}

/// Every differentiable tape op on a 4×3 input, away from kinks.
pub fn op_grad_checks() -> Vec<Check> {
    // |entries| in [0.2, 0.8] ∪ [1.0, 1.6]: off the relu kink and the clamp bounds
    let point = Matrix::from_fn(4, 3, |i, j| {
        let base = 0.2 + 0.6 * ((i * 3 + j) as f64 / 11.0);
        let mag = if (i + j) % 3 == 0 { base + 0.8 } else { base };
        if (i * 7 + j) % 2 == 0 {
            mag
        } else {
            -mag
        }
    });
    op_cases()
        .into_iter()
        .map(|(name, f)| {
            Check::from_result(&format!("grad {name}"), OP_GRAD_TOL, grad_check(f, &point, FD_STEP))
        })
        .collect()
}

/// Log-determinant of `AᵀA + I` for random `A`.
pub fn logdet_grad_check() -> Check {
    let a = randn(5, 5, 77);
    let r = grad_check(
        |t, x| {
            let g = t.transpose(x);
            let s = t.matmul(g, x)?;
            let eye = t.constant(Matrix::identity(5));
            let spd = t.add(s, eye)?;
            t.logdet_spd(spd)
        },
        &a,
        FD_STEP,
    );
    Check::from_result("grad logdet_spd", LOGDET_GRAD_TOL, r)
}

/// Full batch loss against every model parameter, for both priors and
/// both likelihoods (B = 8, P = 4).
pub fn end_to_end_grad_checks() -> Vec<Check> {
    let mut out = Vec::new();
    for (prior_name, prior) in [
        ("standard", Prior::StandardNormal),
        (
            "dpp",
            Prior::Dpp {
                kernel: KernelParams::isotropic(10.0, 1.0, 1.0, 4).expect("valid kernel"),
            },
        ),
    ] {
        for lik in [Likelihood::Gaussian, Likelihood::Bernoulli] {
            let cfg = ModelConfig {
                data_dim: 6,
                latent_dim: 4,
                hidden: vec![7],
                likelihood: lik,
                prior: prior.clone(),
            };
            let name = format!("grad batch loss ({prior_name}, {lik:?})").to_lowercase();
            let r = VaeModel::new(&cfg, &mut rng_from_seed(31)).and_then(|model| {
                let x = Matrix::from_fn(8, 6, |i, j| ((i * 5 + j * 3) % 4) as f64 / 3.0);
                let eps = randn(8, 4, 32);
                param_gradient_error(&model, &x, &eps, 1.0, FD_STEP)
            });
            out.push(Check::from_result(&name, END_TO_END_GRAD_TOL, r));
        }
    }
    out
}

/// Analytic top-10 eigenvalues against a 400-node Nyström discretisation on
/// `[−10σ, 10σ]` for the given one-dimensional kernels.
pub fn nystrom_checks(configs: &[(f64, f64, f64)]) -> Vec<Check> {
    configs
        .iter()
        .map(|&(alpha, rho, sigma)| {
            let name = format!("spectrum vs Nystrom (a={alpha}, r={rho}, s={sigma})");
            let r = KernelParams::isotropic(alpha, rho, sigma, 1).and_then(|p| {
                let analytic = continuous_spectrum(&p, 10)?;
                let numeric = nystrom_eigenvalues(&p, NYSTROM_NODES, 10.0 * sigma)?;
                Ok(analytic
                    .eigenvalues
                    .iter()
                    .zip(&numeric)
                    .map(|(a, n)| (a - n).abs() / a)
                    .fold(0.0, f64::max))
            });
            Check::from_result(&name, NYSTROM_TOL, r)
        })
        .collect()
}

pub const NYSTROM_CONFIGS: [(f64, f64, f64); 3] = [(1.0, 1.0, 1.0), (1000.0, 1.0, 1.0), (1.0, 2.0, 0.5)];

/// Best-first enumeration against sorting the full `n_d ≤ 40` lattice
/// (D = 2); counts mismatched values or multi-indices among the top 200.
pub fn lattice_check() -> Check {
    let r = KernelParams::new(3.0, vec![1.0, 2.0], vec![1.5, 0.5]).and_then(|p| {
        let heap = continuous_spectrum(&p, 200)?;
        let brute = lattice_bruteforce(&p, 40)?;
        let mismatches = heap
            .eigenvalues
            .iter()
            .zip(&heap.multi_indices)
            .zip(&brute)
            .filter(|((v, idx), (bv, bidx))| (*v - bv).abs() > 1e-12 * bv || *idx != bidx)
            .count();
        Ok(mismatches as f64)
    });
    Check::from_result("heap enumeration vs lattice (D=2, top 200)", 0.0, r)
}

/// Sandwich `lower(M) ≤ ln e_k(λ_{1:10k}) ≤ upper(M)` for `M` in
/// `{k, 2k, 5k, 10k}`, with monotone bounds.
///
/// Observed is the worst violation in log units (0 when all hold).
pub fn sandwich_checks(params: &KernelParams, ks: &[usize]) -> Vec<Check> {
    ks.iter()
        .map(|&k| {
            let name = format!("normalizer sandwich k={k}");
            let r = continuous_spectrum(params, 10 * k).and_then(|full| {
                let reference = normalizer_bounds(&full, k)?.log_lower;
                let mut violation: f64 = 0.0;
                let mut prev: Option<(f64, f64)> = None;
                for m in [k, 2 * k, 5 * k, 10 * k] {
                    let b = normalizer_bounds(&full.truncate(m), k)?;
                    let slack = 1e-12 * reference.abs().max(1.0);
                    violation = violation.max(b.log_lower - reference - slack);
                    violation = violation.max(reference - b.log_upper - slack);
                    if let Some((lo, up)) = prev {
                        violation = violation.max(lo - b.log_lower - slack);
                        violation = violation.max(b.log_upper - up - slack);
                    }
                    prev = Some((b.log_lower, b.log_upper));
                }
                Ok(violation.max(0.0))
            });
            Check::from_result(&name, 0.0, r)
        })
        .collect()
}

pub fn sandwich_kernel() -> KernelParams {
    KernelParams::isotropic(1000.0, 1.0, 1.0, 2).expect("valid kernel")
}

/// The whole suite in report order.
pub fn run_all(perturb_lambda: Option<f64>) -> Vec<Check> {
    let mut checks = vec![esp_check(100, 0, perturb_lambda)];
    checks.extend(op_grad_checks());
    checks.push(logdet_grad_check());
    checks.extend(end_to_end_grad_checks());
    checks.extend(nystrom_checks(&NYSTROM_CONFIGS));
    checks.push(lattice_check());
    checks.extend(sandwich_checks(&sandwich_kernel(), &[3, 10, 100]));
    checks
}

pub fn report(checks: &[Check]) -> String {
    let mut out = String::new();
    for c in checks {
        out.push_str(&c.to_string());
        out.push('\n');
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    out.push_str(&format!("{} checks, {} failed\n", checks.len(), failed));
    out
}
