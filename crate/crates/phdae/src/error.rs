//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by assembly, reduction, simulation, and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    Dimension {
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("invalid circuit: {0}")]
    InvalidCircuit(String),

    #[error("matrix is rank deficient: |R[{index},{index}]| = {diag:.3e} below threshold {threshold:.3e}")]
    RankDeficient {
        index: usize,
        diag: f64,
        threshold: f64,
    },

    #[error("singular Jacobian: pivot {pivot:.3e} at index {index}{context}")]
    SingularJacobian {
        index: usize,
        pivot: f64,
        context: String,
    },

    #[error("system is not structurally index-1: {0}")]
    Structural(String),

    #[error("Newton iteration did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("integration failed at step {step} (t = {t}): {source}")]
    Integration {
        step: usize,
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data format error: {0}")]
    DataFormat(String),

    #[error("checksum mismatch for {path}: expected {expected}, found {actual}")]
    Checksum {
        path: String,
        expected: String,
        actual: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(expected: usize, actual: usize, context: impl Into<String>) -> Self {
        Error::Dimension {
            expected,
            actual,
            context: context.into(),
        }
    }

    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::SingularJacobian { .. }
                | Error::NonConvergence { .. }
                | Error::NonFinite(_)
                | Error::Integration { .. }
                | Error::Structural(_)
                | Error::Training(_)
        )
    }
}
