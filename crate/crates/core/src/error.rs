use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

/// Everything that can go wrong inside the engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid architecture at layer {index}: {message}")]
    InvalidArch { index: usize, message: String },

    #[error("stale or mismatched cache for {layer}: {message}")]
    StaleCache { layer: String, message: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("class {class} has {available} samples, {needed} required")]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },

    #[error("activation maximization produced a non-finite iterate at step {step}")]
    AmDiverged { step: usize },

    #[error("undefined TP: no samples of target class {class}")]
    UndefinedTp { class: usize },

    #[error("undefined FP: no samples outside target class {class}")]
    UndefinedFp { class: usize },

    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Model file decoding failures. Each maps to a distinct on-disk defect.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected \"CPDM\", found {found:02x?}")]
    BadMagic { found: Vec<u8> },

    #[error("version mismatch: file has version {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated header")]
    TruncatedHeader,

    #[error("truncated payload in {layer}")]
    TruncatedPayload { layer: String },

    #[error("malformed architecture document: {0}")]
    Json(String),

    #[error("architecture inconsistent with payload: {0}")]
    Inconsistent(String),
}
