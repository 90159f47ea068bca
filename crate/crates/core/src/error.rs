use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("backward requires a scalar output, got shape {0}")]
    NotScalar(Shape),

    #[error("image height and width must be divisible by {required}, got {height}x{width}")]
    Divisibility {
        required: usize,
        height: usize,
        width: usize,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}: unsupported image format ({kind})", path.display())]
    UnsupportedImage { path: PathBuf, kind: String },

    #[error("bad magic bytes: not a DBFW weights file")]
    BadMagic,

    #[error("unsupported DBFW format version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed weights file: {0}")]
    Malformed(String),

    #[error("weights entry `{0}` is missing")]
    MissingEntry(String),

    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
