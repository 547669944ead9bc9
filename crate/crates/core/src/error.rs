use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("factorization failed at pivot {pivot} (value {value:.3e}, matrix size {size})")]
    Factorization { pivot: usize, value: f64, size: usize },

    #[error("integration blew up on path {path} at step {step} (|X| = {value:.3e})")]
    Blowup { path: usize, step: usize, value: f64 },

    #[error("regression failed at node {node}: {reason}")]
    Regression { node: usize, reason: String },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),

    #[error("invalid LQ specification: {0}")]
    InvalidSpec(String),

    #[error("Riccati solution blew up at t = {t:.4} (P = {value:.3e})")]
    RiccatiBlowup { t: f64, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
