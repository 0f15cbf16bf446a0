use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("arity error: {0}")]
    Arity(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("clip too short: {len} samples, need at least {min}")]
    Length { len: usize, min: usize },

    #[error("unsupported audio format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("test generation failed: {0}")]
    Generation(String),

    #[error("invalid package: {0}")]
    InvalidPackage(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Arity(_) => "arity",
            Error::DegenerateBatch(_) => "degenerate-batch",
            Error::UndefinedCorrelation(_) => "undefined-correlation",
            Error::Domain(_) => "domain",
            Error::Length { .. } => "length",
            Error::Format { .. } => "format",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Sampling(_) => "sampling",
            Error::Generation(_) => "generation",
            Error::InvalidPackage(_) => "invalid-package",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
