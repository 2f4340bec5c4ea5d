//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input dimensions {got:?} do not match model descriptor {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },

    #[error("pixel value {value} at flat index {index} is outside [0, 1]")]
    PixelOutOfRange { index: usize, value: f64 },

    #[error("image dimensions must be strictly positive, got {channels}x{height}x{width}")]
    EmptyDimensions {
        channels: usize,
        height: usize,
        width: usize,
    },

    #[error("buffer length {got} does not match {expected} (= channels*height*width)")]
    BufferLength { expected: usize, got: usize },

    #[error("logits must be finite, got ({0}, {1})")]
    NonFiniteLogits(f64, f64),

    #[error("probabilities ({p_real}, {p_fake}) do not form a distribution")]
    InvalidProbs { p_real: f64, p_fake: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("paired batches differ in length: {left} vs {right}")]
    BatchSizeMismatch { left: usize, right: usize },

    #[error("joint support has {states} states, exceeding the enumeration limit {max}")]
    SupportTooLarge { states: usize, max: usize },

    #[error("joint pmf invalid: {0}")]
    InvalidJoint(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format error at byte offset {offset}: {what}")]
    Format { offset: u64, what: String },

    #[error("file truncated: needed {expected} more byte(s) at offset {offset}")]
    Truncated { offset: u64, expected: u64 },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("PGM/PPM parse error at byte {offset}: {what}")]
    PgmParse { offset: usize, what: String },

    #[error("profile parse error at line {line}: {what}")]
    ProfileParse { line: usize, what: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
