//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or dimension mismatch in an array operation. Carries the
    /// offending operation and the shapes/axes involved.
    #[error("dimension mismatch in {op}: {detail}")]
    Dim { op: String, detail: String },

    /// An API was used out of contract (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid input data (degenerate box, bad config value, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A file or stream had the wrong format. `offset` is the byte offset
    /// (or line number, as documented by the parser) where parsing failed.
    #[error("format error at {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for a dimension error.
    pub fn dim(op: &str, detail: impl Into<String>) -> Self {
        Error::Dim { op: op.to_string(), detail: detail.into() }
    }
}
