use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("simulation blow-up: non-finite state in trajectory {trajectory} at step {step}")]
    SimulationBlowUp { trajectory: usize, step: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
