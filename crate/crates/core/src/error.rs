use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DfqError>;

/// Everything that can go wrong inside the toolkit.
///
/// Variants are grouped by [`ErrorClass`] so front ends can map them onto
/// process exit codes without matching on every case.
#[derive(Debug, Error)]
pub enum DfqError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("model is uncalibrated: activation site after layer {site} has no quantization range")]
    Uncalibrated { site: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("header/payload disagreement: {0}")]
    HeaderMismatch(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("refusing to overwrite existing file {0} (pass --overwrite)")]
    WouldOverwrite(PathBuf),
}

/// Coarse classification used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// File or format problems.
    Io,
    /// A precondition of an operation was not met.
    Contract,
    /// NaN/Inf or divergence.
    Numerical,
}

impl DfqError {
    pub fn class(&self) -> ErrorClass {
        match self {
            DfqError::BadMagic { .. }
            | DfqError::VersionMismatch { .. }
            | DfqError::Truncated(_)
            | DfqError::HeaderMismatch(_)
            | DfqError::Format(_)
            | DfqError::Io { .. }
            | DfqError::WouldOverwrite(_) => ErrorClass::Io,
            DfqError::Numerical(_) => ErrorClass::Numerical,
            DfqError::ShapeMismatch { .. }
            | DfqError::InvalidArgument(_)
            | DfqError::Contract(_)
            | DfqError::Uncalibrated { .. } => ErrorClass::Contract,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DfqError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        DfqError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
