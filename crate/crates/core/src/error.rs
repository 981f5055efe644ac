use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),

    #[error("graph already consumed by a previous backward pass")]
    Lifecycle,

    #[error("row {row} of {what} is not a probability distribution (sum {sum})")]
    Normalization {
        what: &'static str,
        row: usize,
        sum: f64,
    },

    #[error("batch norm in train mode needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mask selection error: {0}")]
    Mode(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint checksum mismatch; file is corrupt")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}: bad magic number {found:#010x} (expected {expected:#010x})")]
    Magic {
        file: String,
        found: u32,
        expected: u32,
    },
    #[error("{0}: file truncated")]
    Truncated(String),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{file}: {detail}")]
    Format { file: String, detail: String },
}
