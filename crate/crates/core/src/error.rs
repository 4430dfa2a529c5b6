use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular deformation gradient (det = {det:e})")]
    SingularMatrix { det: f64 },

    #[error("invalid deformation: {0}")]
    InvalidDeformation(String),

    #[error("simulation diverged at step {step}: {reason}")]
    SimulationDiverged { step: usize, reason: String },

    #[error("non-finite gradient at step {step}")]
    GradientDiverged { step: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
