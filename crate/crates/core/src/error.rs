use std::path::PathBuf;

use thiserror::Error;

use crate::objectives::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for length {len} in {op}")]
    Bounds {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mask ratio {ratio} over {n} patches selects {count} patches; need 0 < count < N")]
    DegenerateRatio { ratio: f64, n: usize, count: usize },

    #[error("epoch {epoch} outside schedule range 0..={total}")]
    Range { epoch: usize, total: usize },

    #[error("{0} requires at least one masked patch")]
    EmptyMask(&'static str),

    #[error("no teacher features stored for image {0}")]
    Lookup(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("checkpoint does not match config: {0}")]
    Version(String),

    #[error(
        "non-finite loss at step {step} (batch image {batch_index}): rep={} disc={} pixel={} total={}",
        breakdown.rep, breakdown.disc, breakdown.pixel, breakdown.total
    )]
    NumericAbort {
        step: usize,
        batch_index: usize,
        breakdown: LossBreakdown,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericAbort { .. } => 3,
            Error::Io { .. } => 1,
            _ => 2,
        }
    }
}
