use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    /// The log-density Hessian could not be negated into a positive definite
    /// precision, i.e. the target is not verifiably log-concave at this point.
    #[error("Hessian is not negative definite (pivot {pivot})")]
    HessianNotNegativeDefinite { pivot: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point outside target domain: {0}")]
    Domain(String),

    #[error("mode search failed: {0}")]
    ModeNotFound(String),

    #[error("slice sampler failed: {0}")]
    SliceFailure(String),

    #[error("non-finite draw: {0}")]
    NonFinite(String),

    #[error("calibration profile missing or invalid")]
    MissingCalibration,

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("schema mismatch in {file}: {message}")]
    Schema { file: String, message: String },

    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
