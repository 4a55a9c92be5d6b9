use std::path::{Path, PathBuf};

use eyepurify_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: unsupported bit depth {depth} (only 8-bit images are accepted)")]
    UnsupportedDepth { path: PathBuf, depth: u8 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no eye region: iris channel is empty")]
    NoEyeRegion,
    #[error("{what}: expected {expected_h}x{expected_w}, got {actual_h}x{actual_w}")]
    Resolution {
        what: String,
        expected_h: usize,
        expected_w: usize,
        actual_h: usize,
        actual_w: usize,
    },
    #[error("unknown loss-network layer `{0}`")]
    UnknownLayer(String),
    #[error("no masks prepared for layer `{0}`")]
    MissingMask(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model file: {0}")]
    Model(String),
    #[error("topology mismatch: {0}")]
    Topology(String),
    #[error("image too small: {height}x{width}, need at least {min}x{min}")]
    TooSmall { height: usize, width: usize, min: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite objective or gradient at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        /// Last iterate whose objective and gradient were finite.
        last_good: Vec<f64>,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("unpaired files: {}", .0.join(", "))]
    Unpaired(Vec<String>),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by NaN/Inf values rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Diverged { .. } | Error::Tensor(TensorError::NonFinite(_))
        )
    }

    /// True for failures reading or writing files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Format { .. } | Error::UnsupportedDepth { .. } | Error::Model(_)
        )
    }
}
