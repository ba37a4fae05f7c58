use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("validation failed for `{record}`: field `{field}`: {message}")]
    Validation {
        record: String,
        field: &'static str,
        message: String,
    },

    #[error("window out of range: t={t} + K={k} exceeds horizon {horizon}")]
    WindowOutOfRange { t: usize, k: usize, horizon: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("task buffer `{0}` is empty")]
    EmptyBuffer(String),

    #[error("candidate sampler exhausted after {drawn} draws (needed up to {needed})")]
    SamplerExhausted { drawn: usize, needed: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(
        record: impl Into<String>,
        field: &'static str,
        message: impl Into<String>,
    ) -> Self {
        Error::Validation {
            record: record.into(),
            field,
            message: message.into(),
        }
    }
}
