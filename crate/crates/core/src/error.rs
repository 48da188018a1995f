use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value at position {position} of {context}")]
    NonFinite {
        context: &'static str,
        position: usize,
    },

    #[error("index {index} out of range for stage {stage} (codebook size {size}){}", frame_suffix(*.frame))]
    IndexOutOfRange {
        stage: usize,
        index: u32,
        size: usize,
        frame: Option<usize>,
    },

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("codebook mismatch: expected hash {expected:#018x}, found {found:#018x}")]
    CodebookMismatch { expected: u64, found: u64 },

    #[error("model mismatch: expected hash {expected:#018x}, found {found:#018x}")]
    ModelMismatch { expected: u64, found: u64 },

    #[error("framing error at byte {offset}: {reason}")]
    Framing { offset: usize, reason: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("session rejected by peer: {0}")]
    Rejected(String),

    #[error("timed out waiting for {0}")]
    Timeout(&'static str),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

fn frame_suffix(frame: Option<usize>) -> String {
    match frame {
        Some(f) => format!(" at frame {f}"),
        None => String::new(),
    }
}

/// Coarse classification of errors, used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Protocol,
    Other,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => {
                ErrorClass::Config
            }
            Error::Io(_) => ErrorClass::Io,
            Error::CodebookMismatch { .. }
            | Error::ModelMismatch { .. }
            | Error::Framing { .. }
            | Error::Protocol(_)
            | Error::Rejected(_)
            | Error::Timeout(_) => ErrorClass::Protocol,
            Error::Frame { source, .. } => source.class(),
            _ => ErrorClass::Other,
        }
    }

    pub(crate) fn at_frame(self, frame: usize) -> Error {
        match self {
            Error::IndexOutOfRange {
                stage, index, size, ..
            } => Error::IndexOutOfRange {
                stage,
                index,
                size,
                frame: Some(frame),
            },
            other => Error::Frame {
                frame,
                source: Box::new(other),
            },
        }
    }

    pub(crate) fn framing(offset: usize, reason: impl Into<String>) -> Error {
        Error::Framing {
            offset,
            reason: reason.into(),
        }
    }
}
