use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("invalid tap: {0}")]
    InvalidTap(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    InvalidToken { id: u32, vocab: usize },

    #[error("unsupported option: {0}")]
    UnsupportedOption(String),

    #[error("empty sample: {0}")]
    EmptySample(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("vector is not unit norm (norm {0})")]
    NotNormalized(f64),

    #[error("cannot normalize a zero vector")]
    DegenerateVector,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("backend failure: {0}")]
    Backend(String),
}
