use std::io;

use sinodenoise_nn::NnError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("acceptance gate failed: {0}")]
    Gate(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint error: {0}")]
    Nn(#[from] NnError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Gate(_) => 3,
            Error::NonFinite(_) => 1,
            _ => 2,
        }
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
