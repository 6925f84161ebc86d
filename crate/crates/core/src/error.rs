use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("syntax error at byte {offset}: {msg}")]
    Syntax { offset: usize, msg: String },

    #[error("unknown variable `{name}` at byte {offset} (arity {arity})")]
    UnknownVariable {
        name: String,
        offset: usize,
        arity: usize,
    },

    #[error("variable index {index} exceeds arity {arity}")]
    Arity { index: usize, arity: usize },

    #[error("domain error in `{expr}`: {reason}")]
    Domain { expr: String, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("equation of state: {0}")]
    Eos(String),

    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("spec error at line {line}, column {col}: {msg}")]
    Spec { line: usize, col: usize, msg: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// True for errors that originate in the input description rather than in the numerics.
    pub fn is_spec_error(&self) -> bool {
        matches!(
            self,
            Error::Syntax { .. }
                | Error::UnknownVariable { .. }
                | Error::Arity { .. }
                | Error::Spec { .. }
                | Error::Invalid(_)
                | Error::Shape(_)
                | Error::Unsupported(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
