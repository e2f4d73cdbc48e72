use thiserror::Error;

/// Errors raised by kernels, builders and runners.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated an operation's shape or value contract.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// A configuration (preset, spec, block hyperparameter) is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A NaN/Inf appeared or a numerical check failed.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag for the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config",
            Error::Numerical(_) => "numerical",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! precondition {
    ($cond:expr, $($arg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::Precondition(format!($($arg)+)));
        }
    };
}
pub(crate) use precondition;
