use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to name the field or
/// index that failed validation, so callers can surface actionable messages.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter violates a module invariant. The message names the field.
    #[error("invalid config: {0}")]
    Config(String),

    /// An index is outside its domain.
    #[error("{what} {index} out of range (must be < {bound})")]
    OutOfRange {
        what: &'static str,
        index: u64,
        bound: u64,
    },

    /// Two operands disagree on a dimension.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A dense materialization was requested above the configured cap.
    #[error("sequence length {len} exceeds dense oracle cap {cap}")]
    OracleCap { len: usize, cap: usize },

    /// A query row has no allowed keys, so softmax is undefined.
    #[error("query row {row} is fully masked; softmax undefined")]
    FullyMaskedRow { row: usize },

    /// A query row is not covered by any non-empty tile.
    #[error("query row {row} not covered by any non-empty tile")]
    UncoveredRow { row: usize },

    /// The softmax denominator came out NaN/Inf, i.e. the inputs themselves
    /// contain non-finite values (e.g. a diverged model).
    #[error("attention denominator for query row {row} is not finite; inputs contain NaN or Inf")]
    NonFinite { row: usize },

    /// A serialized artifact (mask file, checkpoint) failed validation.
    #[error("bad artifact: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
