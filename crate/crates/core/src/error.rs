use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadrature did not converge: coefficient {index} moved by {change:e} when nodes doubled (tolerance {tolerance:e})")]
    QuadratureNotConverged {
        index: usize,
        change: f64,
        tolerance: f64,
    },

    #[error("angular separation not reached after {attempts} resamples: max |<w_i, w_j>| = {max_overlap} > {bound}")]
    SeparationFailed {
        attempts: usize,
        max_overlap: f64,
        bound: f64,
    },

    #[error("degenerate SGD state at step {step}: update norm {norm:e}")]
    DegenerateState { step: u64, norm: f64 },

    #[error("design matrix is rank deficient (pivot ratio {ratio:e})")]
    RankDeficient { ratio: f64 },

    #[error("neuron {index} is not unit norm (norm {norm}); Hermite identities need unit directions")]
    NonUnitNeuron { index: usize, norm: f64 },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is numerical (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::QuadratureNotConverged { .. }
                | Error::SeparationFailed { .. }
                | Error::DegenerateState { .. }
                | Error::RankDeficient { .. }
                | Error::NonUnitNeuron { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
