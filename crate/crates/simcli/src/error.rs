use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config error: {0}")]
    Config(String),
    /// A run finished but a checked property did not hold.
    #[error("acceptance failure: {0}")]
    Acceptance(String),
    #[error(transparent)]
    Protocol(#[from] ebscfl_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl SimError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type SimResult<T> = Result<T, SimError>;
