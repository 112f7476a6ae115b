use std::path::PathBuf;

use thiserror::Error;

/// Which part of a model file failed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatFault {
    Truncated,
    BadMagic,
    UnsupportedVersion(u16),
    DescriptorHash,
    Checksum,
    TrailingBytes,
}

impl std::fmt::Display for FormatFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatFault::Truncated => write!(f, "truncated file"),
            FormatFault::BadMagic => write!(f, "bad magic bytes"),
            FormatFault::UnsupportedVersion(v) => write!(f, "unsupported format version {v}"),
            FormatFault::DescriptorHash => write!(f, "architecture descriptor hash mismatch"),
            FormatFault::Checksum => write!(f, "payload checksum mismatch"),
            FormatFault::TrailingBytes => write!(f, "trailing bytes after checksum"),
        }
    }
}

#[derive(Debug, Error)]
pub enum KdisError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("non-finite value at coordinate {index}: {detail}")]
    Numeric { index: usize, detail: String },

    #[error("model format error: {0}")]
    Format(FormatFault),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl KdisError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        KdisError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KdisError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = KdisError> = std::result::Result<T, E>;
