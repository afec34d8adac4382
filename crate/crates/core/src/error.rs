use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("cannot ingest {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("palette holds {0} colors but indexed PNG supports at most 256")]
    Capacity(usize),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite {component} loss ({value})")]
    NonFinite { component: String, value: f64 },

    #[error("environment error: {0}")]
    Environment(String),

    #[error("checkpoint {} holds a {found} state, expected {expected}", path.display())]
    CheckpointKind {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error(
        "checkpoint {} has format version {found}; this build reads version {expected}. \
         Re-save it with a matching release or migrate it with `colorquant` {expected}.x",
        path.display()
    )]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("malformed checkpoint {}: {reason}", path.display())]
    CheckpointFormat { path: PathBuf, reason: String },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Short category label, used for CLI exit codes and log lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Argument(_) => "argument",
            Error::Ingestion { .. } => "ingestion",
            Error::Capacity(_) => "capacity",
            Error::Invariant(_) => "invariant",
            Error::NonFinite { .. } => "numerical",
            Error::Environment(_) => "environment",
            Error::CheckpointKind { .. }
            | Error::CheckpointVersion { .. }
            | Error::CheckpointFormat { .. } => "checkpoint",
            Error::MissingFile(_) | Error::Io(_) => "file",
            Error::Tensor(_) => "tensor",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
        }
    }
}
