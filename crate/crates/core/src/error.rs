//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Matrix/vector shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A matrix failed a structural requirement (symmetry, definiteness,
    /// invertibility, stability).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An iterative solver ran out of iterations.
    #[error("no convergence: {0}")]
    NonConvergence(String),

    /// Scenario configuration is missing, malformed, or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// The simulated state exceeded the divergence guard.
    #[error("divergence at step {step}: state norm {norm:.3e} exceeds 1e9 guard")]
    Divergence { step: usize, norm: f64 },

    /// Filesystem failure, annotated with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
