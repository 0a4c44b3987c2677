use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("matrix is not positive definite after {retries} jitter retries (last jitter {last_jitter:e})")]
    NotPositiveDefinite { retries: usize, last_jitter: f64 },
    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("loss is not a scalar: shape {rows}x{cols}")]
    NotScalarLoss { rows: usize, cols: usize },
    #[error("tape already consumed by a backward pass; call zero_grad first")]
    TapeConsumed,

    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
    #[error("negative spectral tail {tail:e} (trace {trace:e})")]
    NegativeTail { tail: f64, trace: f64 },

    #[error("value outside the likelihood's domain: {0}")]
    DomainError(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: recon={recon}, kld={kld}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        recon: f64,
        kld: f64,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("insufficient samples for class {class}: need {needed}, have {available}")]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
    },
    #[error("unknown window [{start}, {end}]")]
    UnknownWindow { start: f64, end: f64 },

    #[error("only one class present in the labels")]
    SingleClass,
    #[error("too few samples: {0}")]
    TooFewSamples(String),

    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
