use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad archive magic {0:?}")]
    BadMagic([u8; 5]),

    #[error("unsupported archive version {0}")]
    BadVersion(u8),

    #[error("unknown dtype code {0}")]
    BadDtype(u8),

    #[error("truncated archive: {0}")]
    Truncated(String),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("corpus mismatch: {0}")]
    CorpusMismatch(String),
}

impl Error {
    /// Whether the error is caused by bad input data rather than the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
