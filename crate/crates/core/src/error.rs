use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to an op's broadcasting or contraction rule.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A computation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    Numeric(String),

    /// An API precondition was violated (missing cache, wrong tape, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A split region cannot hold a single lookback + horizon window.
    #[error("region `{region}` has {len} steps, fewer than lookback + horizon = {needed}")]
    Sizing {
        region: String,
        len: usize,
        needed: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss in {sub_step} step on anchors {first_anchor}..={last_anchor}")]
    NonFiniteLoss {
        sub_step: &'static str,
        first_anchor: usize,
        last_anchor: usize,
    },

    #[error("i/o error on {path}: {source}")]
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
