//! Crate-wide error type. Every fallible operation reports enough context to
//! act on: shape mismatches print both shapes, file-format failures carry the
//! byte offset, config rejections name the key.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("config: {msg}")]
    Config { msg: String },

    #[error("model file at byte {offset}: {msg}")]
    ModelFormat { offset: u64, msg: String },

    #[error("image {path}: {msg}")]
    Image { path: String, msg: String },

    #[error("training: {msg}")]
    Train { msg: String },

    #[error("evaluation: {msg}")]
    Eval { msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config { msg: msg.into() }
    }

    pub fn train(msg: impl Into<String>) -> Self {
        Error::Train { msg: msg.into() }
    }

    pub fn eval(msg: impl Into<String>) -> Self {
        Error::Eval { msg: msg.into() }
    }
}
