use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the numerical core and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {what} (expected {expected:?}, got {got:?})")]
    Shape { what: &'static str, expected: (usize, usize), got: (usize, usize) },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite objective at iteration {iteration} after the {block} block")]
    NonFinite { iteration: usize, block: &'static str },

    #[error("proportion column {voxel} collapsed to zero")]
    CollapsedColumn { voxel: usize },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: (usize, usize), got: (usize, usize)) -> Self {
        Error::Shape { what, expected, got }
    }

    /// True for failures of the iteration itself rather than of its inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::CollapsedColumn { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
