use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("infeasible construction: {0}")]
    Infeasible(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("probe training failed: {0}")]
    TrainingFailure(String),

    #[error("class {class} has too few samples ({count}, need {needed})")]
    DegenerateClass {
        class: usize,
        count: usize,
        needed: usize,
    },

    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
