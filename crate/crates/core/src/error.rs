use thiserror::Error;

use crate::wire::FrameError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty partition (layout bug)")]
    EmptyPartition,

    #[error("unsupported bit width {0}; expected 2 or 8")]
    UnsupportedBits(u32),

    #[error("code {code} does not fit in {bits} bits")]
    CodeOutOfRange { code: u8, bits: u32 },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid partition layout: {0}")]
    Layout(String),

    #[error("operand partitions are not aligned: {0}")]
    Misaligned(String),

    #[error("cached partition sums requested but operand carries none")]
    MissingSums,

    #[error("non-finite value {0} in quantization input")]
    NonFinite(f32),

    #[error("partition metadata overflows 16-bit float range (min {min}, scale {scale})")]
    MetadataOverflow { min: f32, scale: f32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence {0} already present in cache")]
    DuplicateSequence(u64),

    #[error("unknown sequence {0}")]
    UnknownSequence(u64),

    #[error("empty prompt")]
    EmptyPrompt,

    #[error(transparent)]
    Frame(#[from] FrameError),

    #[error("trace file: {0}")]
    Trace(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
