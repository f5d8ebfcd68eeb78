use thiserror::Error;

/// Errors raised by the model objects and the experiment harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("enumeration budget of {budget} candidate sets exceeded")]
    BudgetExceeded { budget: usize },

    #[error("chain is reducible: vertex {vertex} does not communicate with vertex {other}")]
    Reducible { vertex: usize, other: usize },

    #[error("non-null divergence at vertices {0:?}")]
    NonNullDivergence(Vec<usize>),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unsupported parametrization: {0}")]
    Unsupported(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
