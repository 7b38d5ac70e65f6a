use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("node {0} is not on this tape")]
    NotOnTape(usize),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("parameter {name}: {reason}")]
    ParamError { name: String, reason: String },

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        index: usize,
        what: &'static str,
        size: usize,
    },

    #[error("empty mask: loss requires at least one unmasked position")]
    EmptyMask,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
