use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    /// A caller broke an operation's precondition (bad index, stepping a
    /// finished episode, wrong input length).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// NaN or infinity appeared in a loss, gradient or parameter.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("checkpoint version error: {0}")]
    Version(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
