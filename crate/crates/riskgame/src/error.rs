use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or vector has the wrong shape for the declared model dimensions.
    #[error("dimension mismatch in `{field}`: expected {expected}, got {got}")]
    Dimension {
        field: &'static str,
        expected: String,
        got: String,
    },

    /// A scalar parameter is outside its admissible range.
    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: &'static str, reason: String },

    /// Configuration file could not be parsed or fails schema checks.
    #[error("config error: {0}")]
    Config(String),

    /// Evaluation time outside the model horizon.
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    /// A linear solve against an (assumed positive definite) Gram matrix failed.
    #[error("linear solve failed: {0}")]
    Singular(String),

    /// Eigenvalue computation did not converge.
    #[error("eigenvalue computation failed: {0}")]
    Eigen(String),

    /// Finite-escape of the backward coefficient integration. The value
    /// representation does not exist past this time; callers must abort.
    #[error("coefficient integration diverged at t = {t} (finite escape)")]
    BlowUp { t: f64 },

    /// Too many simulated paths produced non-finite state.
    #[error("{flagged} of {total} paths flagged non-finite (limit {limit})")]
    TooManyFlagged {
        flagged: usize,
        total: usize,
        limit: usize,
    },

    /// Estimation impossible (e.g. every path flagged).
    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
