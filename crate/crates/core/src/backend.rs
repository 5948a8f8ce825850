use thiserror::Error;

/// Failure of a reasoner or evaluator backend call.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("no applicable rule: {0}")]
    NoRule(String),
    #[error("backend rejected request: {0}")]
    Rejected(String),
}
