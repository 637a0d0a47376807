use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A raw vector summed to (numerical) zero, so it cannot be normalized.
    #[error("zero-mass vector: sum {sum} is below the normalization cutoff")]
    ZeroMass { sum: f64 },

    #[error("vocabulary size mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: usize, found: usize },

    #[error("malformed weights: {0}")]
    Weight(String),

    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("training stream too short: {len} tokens for order {order}")]
    EmptyStream { len: usize, order: usize },

    #[error("model file format error: {0}")]
    Format(String),

    #[error("model file invariant violation: {0}")]
    Invariant(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("enumeration budget exceeded: {states} states > {budget}")]
    BudgetExceeded { states: u64, budget: u64 },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    /// A state the algorithms cannot reach on valid inputs (e.g. a rejection
    /// at a position where the residual distribution has zero mass).
    #[error("internal invariant violation: {0}")]
    Internal(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
