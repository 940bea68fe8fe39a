use thiserror::Error;

/// Error type shared by every subsystem in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A single tensor has an unusable shape for the requested operation.
    #[error("bad shape for {op}: {shape:?} ({reason})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// Non-finite value (NaN or Inf) produced or supplied.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// An index (class label, parameter id) is out of range.
    #[error("index {index} out of range for {what} (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// Operation requires state that has not been established yet.
    #[error("invalid state: {0}")]
    State(String),

    /// A configuration value is invalid.
    #[error("invalid config: {0}")]
    Config(String),

    /// Input sequence is empty (or empty after voice activity detection).
    #[error("empty utterance: {0}")]
    EmptyUtterance(String),

    /// Input sequence is too short for the requested operation.
    #[error("sequence too short: {0}")]
    TooShort(String),

    /// Requested more items than are available.
    #[error("count error: {0}")]
    Count(String),

    /// A metric cannot be computed from the given score set.
    #[error("metric error: {0}")]
    Metric(String),

    /// Training diverged (non-finite loss or gradients).
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A serialized artifact is malformed.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
