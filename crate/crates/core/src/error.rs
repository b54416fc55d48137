use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("covariance of component {component} is ill-conditioned (factorization failed)")]
    IllConditioned { component: usize },

    #[error("patch {index} has zero likelihood under every component")]
    DegeneratePatch { index: usize },

    #[error("insufficient data: {samples} samples for {components} components")]
    InsufficientData { samples: usize, components: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("patch size {patch_size} exceeds image dimensions {width}x{height}")]
    PatchTooLarge {
        patch_size: usize,
        width: usize,
        height: usize,
    },

    #[error("non-finite values at denoising stage {stage}")]
    NonFinite { stage: usize },

    #[error("non-finite SURE divergence estimate")]
    NonFiniteDivergence,

    #[error("model file has bad magic bytes")]
    BadMagic,

    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u16),

    #[error("model checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("model file truncated: need {needed} bytes, have {actual}")]
    Truncated { needed: usize, actual: usize },

    #[error("model file has {0} unexpected trailing bytes")]
    TrailingBytes(usize),

    #[error("malformed PGM: {0}")]
    Pgm(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
