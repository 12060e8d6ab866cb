use std::path::PathBuf;

use thiserror::Error;

/// Location of a non-finite value inside a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TexelLocation {
    pub frame: Option<usize>,
    pub y: usize,
    pub x: usize,
    pub channel: usize,
}

impl std::fmt::Display for TexelLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(frame) = self.frame {
            write!(f, "frame {frame}, ")?;
        }
        write!(f, "texel (y={}, x={}), channel {}", self.y, self.x, self.channel)
    }
}

#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("blob {path} has {actual} bytes, expected {expected}")]
    BlobSize { path: PathBuf, expected: u64, actual: u64 },

    #[error("non-finite value at {0}")]
    NonFinite(TexelLocation),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown channel group `{0}`")]
    UnknownGroup(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),

    #[error("degenerate dual-quaternion blend at vertex {vertex}")]
    DegenerateBlend { vertex: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("optimization diverged at step {step}: loss {loss:.6e} exceeds 10x initial {initial:.6e}")]
    Divergence { step: usize, loss: f64, initial: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn manifest(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Manifest { path: path.into(), message: message.into() }
    }

    /// True for failures that originate in the numerics rather than in inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::Divergence { .. } | Error::DegenerateBlend { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
