use thiserror::Error;

/// Errors raised by the library. Non-convergence of an iteration is reported
/// through run reports, never through this type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel block-row {row} is all zeros; normalization is undefined")]
    ZeroBlockRow { row: usize },

    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),

    #[error("forward tape does not match the model: {0}")]
    TapeMismatch(String),

    #[error("shape mismatch between layers {first} and {second} in a smoothness run")]
    SmoothnessShape { first: usize, second: usize },

    #[error("invalid training target: {0}")]
    InvalidTarget(String),

    #[error("infeasible start: {0}")]
    InfeasibleStart(String),

    #[error("insufficient samples for class {class}: requested {requested}, available {available}")]
    InsufficientSamples {
        class: usize,
        requested: usize,
        available: usize,
    },

    #[error("idx format error at byte offset {offset}: {message}")]
    Idx { offset: u64, message: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u8, supported: u8 },
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("corrupt checkpoint at offset {offset}: {message}")]
    Corrupt { offset: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}
