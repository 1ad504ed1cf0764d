use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("basis error: {0}")]
    Basis(String),
    #[error("term specification error: {0}")]
    Spec(String),
    #[error("numerical error: {message} (condition estimate {condition:.3e})")]
    Numerical { message: String, condition: f64 },
    #[error("diagnostic error: {0}")]
    Diagnostic(String),
    #[error("state error: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn numerical(message: impl Into<String>, condition: f64) -> Self {
        Error::Numerical {
            message: message.into(),
            condition,
        }
    }
}
