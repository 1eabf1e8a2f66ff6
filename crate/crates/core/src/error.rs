use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("ambient dimension {cols} too small for {blocks} blocks of {rows} rows")]
    InsufficientDimension { blocks: usize, rows: usize, cols: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("value {value} outside the open bound (-{bound}, {bound})")]
    OutOfBound { value: f64, bound: f64 },
    #[error("expected {expected} inputs, got {got}")]
    IncompleteSet { expected: usize, got: usize },
    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),
    #[error("matrix is not invertible: {0}")]
    Singular(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("sign calibration failed: {0}")]
    Calibration(String),
    #[error("round aborted: {0}")]
    RoundAborted(String),
    #[error("wire format: {0}")]
    Wire(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_shape(
    what: &str,
    got: (usize, usize),
    expected: (usize, usize),
) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: format!("{what} {}x{}", expected.0, expected.1),
            got: format!("{}x{}", got.0, got.1),
        })
    }
}
