use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid window configuration: {0}")]
    Window(String),

    #[error("pair mask is empty: no pair participates in the loss")]
    EmptyMask,

    #[error("no evaluable pixels")]
    NoPixels,

    #[error("window at ({0}, {1}) has no valid neighbours")]
    EmptyWindow(usize, usize),

    #[error("configuration is not eligible for the strided path: {0}")]
    NotStridable(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
