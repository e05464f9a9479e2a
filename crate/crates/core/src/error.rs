use thiserror::Error;

use crate::tensor::NumericFault;

#[derive(Debug, Error)]
pub enum UnpError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("numeric fault: {0}")]
    Numeric(String),
    #[error("degenerate amplitude for configuration {0:?}")]
    DegenerateAmplitude(Vec<u8>),
    #[error("degenerate column: norm {0:e} below threshold")]
    DegenerateColumn(f64),
    #[error("degenerate superposition: norm {0:e}")]
    DegenerateSuperposition(f64),
    #[error("system too large for dense evaluation: {0} sites")]
    TooLarge(usize),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invalid initial state `{0}`")]
    StateSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<NumericFault> for UnpError {
    fn from(f: NumericFault) -> Self {
        UnpError::Numeric(f.to_string())
    }
}

pub type Result<T> = std::result::Result<T, UnpError>;
