use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at data row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("divergence at epoch {epoch}: {what}")]
    Divergence { epoch: usize, what: String },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn dimension(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            got,
        }
    }

    /// Stable category code, used by the CLI as its process exit code.
    pub fn category_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 3,
            Error::Parse { .. } => 4,
            Error::Dimension { .. } => 5,
            Error::EmptyInput(_) => 6,
            Error::Numerical(_) => 7,
            Error::Divergence { .. } => 8,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
