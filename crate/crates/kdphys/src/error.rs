//! Crate-wide error types.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that cannot be combined: mismatched operands, kernels larger
    /// than their padded input, bad permutations, and the like.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value outside its documented range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward operation produced NaN or infinity.
    #[error("non-finite values produced by {0}")]
    NonFinite(String),

    /// Input carries no usable signal (zero variance, all-zero frames, ...).
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    /// Pearson correlation of a constant series.
    #[error("undefined correlation: {0} series has zero variance")]
    UndefinedCorrelation(&'static str),

    /// Incompatible network wiring (channel mismatches between paired layers, ...).
    #[error("architecture error: {0}")]
    Architecture(String),

    /// Training aborted (non-finite loss, empty dataset, ...).
    #[error("training error: {0}")]
    Training(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Failures while decoding the on-disk artifact formats. Each corruption
/// class is distinct so callers (and tests) can tell them apart.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected a {expected} file")]
    BadMagic { expected: &'static str },

    #[error("truncated file: needed {needed} more byte(s)")]
    Truncated { needed: usize },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("malformed content: {0}")]
    Malformed(String),

    #[error("timestamps not strictly increasing at row {0}")]
    NonMonotoneTime(usize),
}
