use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient samples: need at least {needed} inputs, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("matrix not positive definite (failing pivot {pivot})")]
    Singular { pivot: usize },

    #[error("power iteration produced a zero vector after {restarts} restarts")]
    ZeroVector { restarts: usize },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing target covariances for grid-search alpha selection")]
    MissingTarget,

    #[error("fewer than two active layers remain")]
    Exhausted,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// True for errors caused by degenerate numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. }
                | Error::ZeroVector { .. }
                | Error::Degenerate(_)
                | Error::Numerical(_)
        )
    }
}
