use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic in {0}")]
    BadMagic(String),

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("length inconsistency: {0}")]
    Length(String),

    #[error("dataset generation timed out: {0}")]
    GenerationTimeout(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("non-finite {what} at step {step}; offending batch dumped to {dump:?}")]
    NonFinite {
        what: String,
        step: u64,
        dump: Option<PathBuf>,
    },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation errors map to exit code 2, everything else to 1.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Shape(_))
    }
}
