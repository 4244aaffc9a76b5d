use std::path::PathBuf;

use thiserror::Error;

/// Axis of a 4-D tensor, used to name the offending extent in shape errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Axis::Batch => "batch",
            Axis::Channel => "channel",
            Axis::Height => "height",
            Axis::Width => "width",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {axis} extent mismatch (expected {expected}, got {got})")]
    Dimension {
        op: &'static str,
        axis: Axis,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("failed to decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error("unsupported image format in {0}")]
    UnsupportedFormat(PathBuf),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint fingerprint mismatch (file {found}, expected {expected})")]
    Fingerprint { expected: String, found: String },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: Axis, expected: usize, got: usize) -> Self {
        Error::Dimension {
            op,
            axis,
            expected,
            got,
        }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
