use thiserror::Error;

/// Errors raised by the simulator, learners, oracles and harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("plot failed: {0}")]
    Plot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
