//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes. Carries both shapes so the message is
    /// actionable without a debugger.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An op produced NaN or Inf from finite inputs, or was fed non-finite data.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Subject placement would exceed the canvas.
    #[error("placement error: {0}")]
    Placement(String),

    /// Configuration file / flag problems. `field` is the offending key.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Unknown configuration key (strict schema).
    #[error("config error: unknown key `{0}`")]
    UnknownKey(String),

    /// Malformed file framing (bad magic, truncation, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Checksum mismatch on read.
    #[error("corruption error: {0}")]
    Corruption(String),

    /// File written by a newer writer than this reader understands.
    #[error("version error: file version {found} is newer than supported {supported}")]
    Version { found: u32, supported: u32 },

    /// Training diverged (NaN loss). The last finite-loss checkpoint is kept
    /// by the caller that owns it.
    #[error("training error: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
