use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {count} images")]
    IndexOutOfRange { index: u64, count: u64 },

    #[error("timestep {t} out of range 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("non-finite value {value} in tensor `{tensor}`")]
    NonFinite { tensor: String, value: f32 },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("truncated input: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("external command failed: {0}")]
    External(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by malformed or tampered input files.
    pub fn is_corrupt_input(&self) -> bool {
        matches!(
            self,
            Error::CorruptArchive(_) | Error::Truncated { .. } | Error::Image(_) | Error::Csv(_)
        )
    }

    /// True for errors caused by caller-supplied arguments or configuration.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::IndexOutOfRange { .. }
                | Error::TimestepOutOfRange { .. }
                | Error::ShapeMismatch { .. }
        )
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
