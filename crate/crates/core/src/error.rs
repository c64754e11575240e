use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-binary mask entry {value} at index {index}")]
    NonBinaryEntry { index: usize, value: u8 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("KL penalty needs at least one latent distribution")]
    EmptySequence,

    #[error("invalid sequence length {len} for {available} available steps")]
    InvalidLength { len: usize, available: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("bad IDX magic number {0:#010x}")]
    BadMagic(u32),

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("variance needs at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
