use std::path::PathBuf;

/// Error type shared by the whole pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/image shape disagreement; the message names the offending dims.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Mathematical domain violation (log of non-positive, sigma <= 0, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs fail a data-level precondition (non-finite values, bad labels).
    #[error("validation error: {0}")]
    Validation(String),

    /// File content does not match the expected on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration is inconsistent (unknown keys, invalid settings).
    #[error("configuration error: {0}")]
    Config(String),

    /// Runtime raster/geometry disagreement (image vs checkpoint dims).
    #[error("configuration error: {0}")]
    Geometry(String),

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The command was invoked with missing or conflicting inputs.
    #[error("usage error: {0}")]
    Usage(String),

    /// Problem located in user-supplied data (names the offending item).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure at runtime (NaN gradients, saturated losses).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for usage/config problems,
    /// 3 for data/geometry problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Data(_)
            | Error::Dimension(_)
            | Error::Format(_)
            | Error::Geometry(_)
            | Error::Io { .. }
            | Error::Image { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
