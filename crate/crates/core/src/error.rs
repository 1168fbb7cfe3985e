use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("time ordering violated: s = {s} must not exceed t = {t}")]
    TimeOrder { s: f64, t: f64 },
    #[error("time {t} outside the coefficient horizon [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("solution blew up at t = {t} (sup norm {value})")]
    BlowUp { t: f64, value: f64 },
    #[error("ill-conditioned system (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::InvalidInput(msg.into()))
}
