use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("cannot draw {requested} items from a population of {available}")]
    Capacity { requested: usize, available: usize },

    #[error(
        "shard {shard} has {positives} distinct positive classes but its buffer holds {capacity}; \
         increase the sampling ratio"
    )]
    BufferOverflow {
        shard: usize,
        positives: usize,
        capacity: usize,
    },

    #[error("non-finite value at iteration {iteration}: {detail}")]
    NumericalFailure { iteration: u64, detail: String },

    #[error("far target {far_target} needs at least {required} impostor scores, got {available}")]
    InfeasibleFar {
        far_target: f64,
        required: usize,
        available: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
