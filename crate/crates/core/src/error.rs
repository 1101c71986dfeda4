use crate::dataset::DatasetKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed input; `line` and `column` are 1-based.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    /// Well-formed input that violates a dataset invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("expected a `{expected}` file, found `{found}`")]
    KindMismatch {
        expected: DatasetKind,
        found: DatasetKind,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by the content of the input rather than the
    /// environment (everything except I/O).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}
