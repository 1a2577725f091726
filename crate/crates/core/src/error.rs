use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no frame exceeds the edge threshold; nothing left after trimming")]
    EmptyAfterTrim,

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("unit sequence of length {len} does not fit in {target} frames")]
    LengthOverflow { len: usize, target: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::EmptyAfterTrim => "EmptyAfterTrim",
            Error::DegenerateData(_) => "DegenerateData",
            Error::LengthOverflow { .. } => "LengthOverflow",
            Error::Divergence { .. } => "DivergenceError",
            Error::IncompatibleCheckpoint(_) => "IncompatibleCheckpoint",
            Error::Numerical(_) => "NumericalError",
            Error::Format { .. } => "FormatError",
            Error::Config(_) => "ConfigError",
            Error::Io { .. } => "IoError",
        }
    }
}
