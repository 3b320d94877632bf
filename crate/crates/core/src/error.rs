use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid barrier at node {node}: {reason}")]
    InvalidBarrier { node: usize, reason: String },

    #[error("simulation diverged at step {step} (particle {particle}, state {value})")]
    SimulationDiverged {
        step: usize,
        particle: usize,
        value: f64,
    },

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("no contraction after {iterations} iterations (estimated ratio {ratio:.4})")]
    NoContraction { iterations: usize, ratio: f64 },

    #[error("no certifiable saddle cell (maximin {maximin}, minimax {minimax})")]
    NoSaddleFound { maximin: f64, minimax: f64 },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
