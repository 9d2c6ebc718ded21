use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// Malformed NPY or sidecar content.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input this crate deliberately does not handle (Fortran order, f64, ...).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Manifest or shape validation failure.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: String,
        found: String,
    },

    #[error("k-means needs at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("class {class} has {got} training points, needs at least {needed}")]
    UndersizedClass {
        class: usize,
        got: usize,
        needed: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    /// Train/test leakage or other evaluation-integrity violation.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        found: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }
}
