use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("point off manifold {manifold}: {detail}")]
    NotOnManifold { manifold: String, detail: String },

    #[error("cut locus: {detail}")]
    CutLocus { detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
