use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: String,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A structural requirement of a layer variant was violated (e.g. tying with d != d_h).
    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("incompatible version: {0}")]
    Version(String),

    #[error("i/o error on {}{}: {source}", path.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Io {
        path: PathBuf,
        line: Option<usize>,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dims(op: impl Into<String>, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Dimension {
            op: op.into(),
            lhs,
            rhs,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            line: None,
            source,
        }
    }

    pub fn io_at(path: impl Into<PathBuf>, line: usize, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            line: Some(line),
            source,
        }
    }

    pub fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
