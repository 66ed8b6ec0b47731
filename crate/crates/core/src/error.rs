use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller misuse: wrong argument shape, bad flag, non-scalar loss.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// NaN/Inf encountered or an iterative method failed to converge.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A store no longer matches the mask or layout it was paired with.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("corrupt checkpoint ({section}): {detail}")]
    CorruptCheckpoint { section: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &str, a: &[usize], b: &[usize]) -> Self {
        Error::Config(format!("{op}: shape mismatch {a:?} vs {b:?}"))
    }

    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Config(_) | Error::Data(_) | Error::Integrity(_) | Error::CorruptCheckpoint { .. } | Error::Io(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}
