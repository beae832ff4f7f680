use std::path::{Path, PathBuf};

pub type Result<T, E = AsukaError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum AsukaError {
    #[error("invalid size {height}x{width}: {reason}")]
    InvalidSize { height: usize, width: usize, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("patch-level mask ratio {ratio:.4} already exceeds target {target:.4}")]
    RatioExceeded { ratio: f64, target: f64 },

    #[error("schedule coefficient a(t) = {a:e} at t = {t} is too small to invert")]
    SingularCoefficient { t: usize, a: f64 },

    #[error("frozen parameters changed: {0}")]
    FrozenViolation(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image codec: {0}")]
    Image(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("transport: {0}")]
    Transport(String),

    #[error("protocol: {message}")]
    Protocol { message: String, raw_response: String },

    #[error("scorer plugin `{name}` failed: {message}")]
    Plugin { name: String, message: String },
}

impl AsukaError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Self::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::ShapeMismatch(msg.into())
    }
}
