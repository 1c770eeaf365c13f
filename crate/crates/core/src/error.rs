use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("input too short: {0}")]
    TooShort(String),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("synthesis window does not overlap-add to a nonzero envelope (hop {hop}, window {window})")]
    NotCola { hop: usize, window: usize },
    #[error("silent signal: {0}")]
    Silent(String),
    #[error("degenerate reference span: {0}")]
    DegenerateSpan(String),
    #[error("prediction filter solve failed in frequency bin {bin}")]
    Solver { bin: usize },
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("external stage directory {dir} is missing {} utterance(s): {}", .missing.len(), .missing.join(", "))]
    ExternalCoverage { dir: PathBuf, missing: Vec<String> },
    #[error("output directory {} already exists (use --force to overwrite)", .0.display())]
    OutputExists(PathBuf),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("wav error in {}: {source}", .path.display())]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
