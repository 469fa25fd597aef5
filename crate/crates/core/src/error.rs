use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("model check failed: {0}")]
    Model(String),

    #[error("non-finite state on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("singular regression at step {step}: {detail}")]
    SingularRegression { step: usize, detail: String },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("time step {dt} violates the CFL limit; admissible dt <= {admissible}")]
    Cfl { dt: f64, admissible: f64 },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn argument<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Argument(msg.into()))
}
