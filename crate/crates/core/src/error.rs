use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numeric error: non-finite value produced by {op}")]
    Numeric { op: &'static str },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid {field}: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("infeasible pool: {size} candidates but the smallest budget is {min_budget}")]
    InfeasiblePool { size: usize, min_budget: usize },

    #[error("aggregation error: missing pair for {0}")]
    Aggregation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Short stable tag used for one-line machine-parseable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Numeric { .. } => "numeric",
            Error::Argument(_) => "argument",
            Error::Validation { .. } => "validation",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::InfeasiblePool { .. } => "infeasible_pool",
            Error::Aggregation(_) => "aggregation",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}
