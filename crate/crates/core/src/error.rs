use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported constellation order {0} (expected 4, 16 or 64)")]
    UnsupportedOrder(usize),

    #[error("non-finite {quantity} at layer {layer}")]
    NonFinite { layer: usize, quantity: &'static str },

    #[error("non-finite gradient for tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("instance too large for exhaustive enumeration: {candidates} candidates exceeds bound {bound}")]
    TooLarge { candidates: u128, bound: u128 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown detector `{0}`")]
    UnknownDetector(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by the numerics rather than by the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
