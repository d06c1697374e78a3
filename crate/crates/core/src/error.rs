//! Crate-wide error type.
//!
//! Each variant maps onto one CLI exit class (see [`Error::exit_code`]).

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; carries both operand shapes.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Training produced a non-finite loss term.
    #[error("numeric divergence at epoch {epoch}, batch {batch}: {diagnostic}")]
    Divergence {
        epoch: usize,
        batch: usize,
        diagnostic: String,
    },

    /// A loss term evaluated to NaN or ±∞.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable class name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } | Error::Contract(_) | Error::Config(_) => "config",
            Error::Data(_) | Error::Parse { .. } | Error::Io { .. } => "data",
            Error::Divergence { .. } | Error::NonFinite(_) => "divergence",
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "data" => 3,
            _ => 4,
        }
    }
}
