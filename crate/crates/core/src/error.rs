use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    DimensionMismatch {
        left_w: usize,
        left_h: usize,
        right_w: usize,
        right_h: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scene {scene}: {what} out of bounds")]
    OutOfBounds { scene: String, what: String },

    #[error("scene {0}: box annotations required but missing")]
    MissingBoxes(String),

    #[error("unknown scene id {0}")]
    UnknownScene(usize),

    #[error("forward trace is stale (recorded at parameter version {trace}, model is at {model})")]
    StaleTrace { trace: u64, model: u64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("schema violation at {field}: {message}")]
    Schema { field: String, message: String },

    #[error("training diverged: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short category tag, used by the CLI for exit codes and messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension",
            Error::EmptyInput(_) => "empty-input",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::OutOfBounds { .. } => "bounds",
            Error::MissingBoxes(_) => "missing-boxes",
            Error::UnknownScene(_) => "unknown-scene",
            Error::StaleTrace { .. } => "stale-trace",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::NonFinite(_) => "non-finite",
        }
    }
}
