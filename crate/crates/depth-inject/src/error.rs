use std::path::{Path, PathBuf};

use depth_inject_core::Error as CoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Where in a file a parse failure was detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Byte(u64),
    Line(usize),
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Location::Byte(b) => write!(f, "byte {b}"),
            Location::Line(l) => write!(f, "line {l}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {at}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        at: Location,
        reason: String,
    },

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("training aborted at step {step}: {reason}")]
    NanAbort { step: usize, reason: String },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, at: Location, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            at,
            reason: reason.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit status: 1 for configuration problems, 2 for failures
    /// while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Core(CoreError::Config(_)) => 1,
            _ => 2,
        }
    }

    /// Short stable identifier of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Config(_) | Error::Core(CoreError::Config(_)) => "config",
            Error::Core(CoreError::NumericInstability(_)) | Error::NanAbort { .. } => "numeric",
            Error::Core(_) => "runtime",
        }
    }
}
