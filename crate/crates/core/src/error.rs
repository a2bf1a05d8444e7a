use thiserror::Error;

/// Errors raised by the estimation and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A model or configuration parameter is outside its admissible range.
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// Matrix shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A matrix that must have full column rank does not.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Fewer than the requested number of non-negligible eigenvalues.
    #[error("effective rank {found} is below the requested {requested} factors")]
    Rank { requested: usize, found: usize },

    /// A covariance matrix that must be positive definite is not.
    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    /// A least-squares update in the alternating estimator failed.
    #[error("least-squares update failed for {block}: regressors are collinear")]
    Update { block: String },

    /// A matrix that must be inverted is numerically singular.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// Monte Carlo experiment aborted (too many failed replications, broken identity).
    #[error("experiment failed: {0}")]
    Experiment(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Error {
    Error::Parameter {
        name,
        reason: reason.into(),
    }
}
