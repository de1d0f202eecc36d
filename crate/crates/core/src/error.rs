use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid patch configuration: {0}")]
    InvalidPatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("x-prediction singularity: 1 - t = {gap} is below the guard {guard}")]
    Singularity { gap: f64, guard: f64 },

    #[error("zero-norm feature vector at token {0}")]
    ZeroNorm(usize),

    #[error("matrix is not positive semi-definite (eigenvalue {0})")]
    NotPsd(f64),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("version mismatch: {0}")]
    VersionMismatch(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("inconsistent feature shape: {0}")]
    InconsistentShape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Error {
    Error::ShapeMismatch { expected: format!("{expected:?}"), actual: format!("{actual:?}") }
}
