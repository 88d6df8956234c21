use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the core pipeline operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("modality violation: {0}")]
    ModalityViolation(String),
    #[error("invalid document: {0}")]
    InvalidDocument(String),
    #[error("stream of length {len} exceeds sequence length {max}")]
    TooLong { len: usize, max: usize },
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },
    #[error("token {token} out of range (limit {limit})")]
    OutOfRange { token: u32, limit: u32 },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("malformed infill instance: {0}")]
    MalformedInfill(String),
    #[error("missing field {0:?}")]
    MissingField(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("candidate pool is empty")]
    EmptyPool,
}

pub(crate) fn invalid_config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
