use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed input: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: declared size {width}x{height} exceeds the {cap}x{cap} limit")]
    DimensionOverflow {
        path: PathBuf,
        width: u64,
        height: u64,
        cap: u64,
    },
    #[error("{path}:{line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: checksum mismatch, file is corrupt")]
    Checksum { path: PathBuf },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: invalid report: {reason}")]
    Report { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] thinseg_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
