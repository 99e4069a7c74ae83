use thiserror::Error;

/// Errors produced by the alignment library.
#[derive(Debug, Error)]
pub enum AlignError {
    /// Tensor or map dimensions do not satisfy an operator's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A file failed a magic/digest/consistency check.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Training produced non-finite values.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// A request cannot be satisfied (e.g. batch plan with too few identities).
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AlignError>;

impl AlignError {
    pub fn shape(msg: impl Into<String>) -> Self {
        AlignError::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        AlignError::Config(msg.into())
    }
    pub fn integrity(msg: impl Into<String>) -> Self {
        AlignError::Integrity(msg.into())
    }
}
