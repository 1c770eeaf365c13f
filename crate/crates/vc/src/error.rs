use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite gradient for parameter '{0}'; step aborted")]
    NonFiniteGradient(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite loss at step {step} (recon {recon}, commit {commit})")]
    NonFiniteLoss { step: usize, recon: f64, commit: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("input too short: {0}")]
    TooShort(String),
    #[error("unknown speaker '{0}'")]
    UnknownSpeaker(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("model file {}: {msg}", .path.display())]
    ModelFormat { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] revoicer_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
