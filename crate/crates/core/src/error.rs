use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("segmentation produced no region of at least {min_area} px")]
    EmptySegmentation { min_area: usize },

    #[error("scoring backend error on axis `{axis}`: {message}")]
    Backend { axis: String, message: String },

    #[error("scoring protocol error on axis `{axis}`: {message}")]
    Protocol { axis: String, message: String },

    #[error(
        "filter rejected every candidate ({candidates} scored); composite histogram {histogram:?}"
    )]
    EmptyCorpus {
        candidates: usize,
        histogram: Vec<usize>,
    },

    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_good: Box<crate::dit::Checkpoint>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for failures caused by NaN/Inf or divergence rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Diverged { .. })
    }
}
