//! DPP-VAE: a variational auto-encoder whose latent batch is regularised by a
//! continuous k-DPP prior.
//!
//! The crate is organised bottom-up:
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`linalg`] | dense matrices, Cholesky with jitter, Jacobi eigensolver, PCA |
//! | [`autodiff`] | reverse-mode tape over matrices with a log-determinant primitive |
//! | [`dpp`] | Gaussian quality/similarity kernel, operator spectrum, elementary symmetric polynomials, normaliser bounds |
//! | [`models`] | MLP encoder/decoder, standard and DPP KL terms, Adam training loop, checkpoints |
//! | [`data`] | IDX loader, imbalanced subsampling, Gaussian blobs, simulated odour-trial spike counts |
//! | [`eval`] | multinomial logit, balanced cross-validation, metrics, generated-sample audit, replay frames |
//! | [`oracle`] | independent reference computations used by the self-test and the test suites |

pub mod autodiff;
pub mod data;
pub mod dpp;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod models;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::Matrix;
