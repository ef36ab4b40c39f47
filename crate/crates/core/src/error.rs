use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("diffusion step {t} out of range [{min}, {max}]")]
    StepOutOfRange { t: usize, min: usize, max: usize },

    #[error("loss mask selects no elements")]
    EmptyMask,

    #[error("class id {class} out of range for {num_classes} classes")]
    InvalidClass { class: usize, num_classes: usize },

    #[error("missing conditioning latent: {0}")]
    MissingConditioning(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("content digest mismatch (stored {stored}, computed {computed})")]
    DigestMismatch { stored: String, computed: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
