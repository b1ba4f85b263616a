use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TpError {
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("invalid program: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("invalid sampling spec: {0}")]
    InvalidSpec(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(String),
}

impl TpError {
    /// Process exit code: 1 for validation-type failures, 2 for numeric ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            TpError::Numeric(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, TpError>;

pub(crate) fn unsupported<T>(msg: impl Into<String>) -> Result<T> {
    Err(TpError::Unsupported(msg.into()))
}

pub(crate) fn numeric<T>(msg: impl Into<String>) -> Result<T> {
    Err(TpError::Numeric(msg.into()))
}
