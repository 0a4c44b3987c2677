//! Fixtures shared by the benchmarks.

use dppvae_core::dpp::KernelParams;
use dppvae_core::models::{standard_normal, Likelihood, ModelConfig, Prior, VaeModel};
use dppvae_core::rng::SeedStreams;
use dppvae_core::Matrix;

/// `GᵀG + n·I` for a seeded Gaussian `G`.
pub fn spd_matrix(n: usize, seed: u64) -> Matrix {
    let g = standard_normal(n, n, &mut SeedStreams::new(seed).rng("spd"));
    g.t_matmul(&g).expect("square").add_diagonal(n as f64)
}

/// `n` log-eigenvalues spread over six decades.
pub fn log_spectrum(n: usize) -> Vec<f64> {
    (0..n).map(|i| -(i as f64) * 14.0 / n as f64).collect()
}

pub fn dpp_kernel(latent_dim: usize) -> KernelParams {
    KernelParams::isotropic(1000.0, 1.0, 1.0, latent_dim).expect("valid kernel")
}

/// A freshly initialised model with the given prior and a random batch for it.
pub fn model_and_batch(dpp: bool, data_dim: usize, latent_dim: usize, batch: usize, seed: u64) -> (VaeModel, Matrix) {
    let prior = if dpp {
        Prior::Dpp {
            kernel: dpp_kernel(latent_dim),
        }
    } else {
        Prior::StandardNormal
    };
    let mut cfg = ModelConfig::new(data_dim, Likelihood::Gaussian, prior);
    cfg.latent_dim = latent_dim;
    let streams = SeedStreams::new(seed);
    let model = VaeModel::new(&cfg, &mut streams.rng("init")).expect("valid model");
    let x = standard_normal(batch, data_dim, &mut streams.rng("data"));
    (model, x)
}
