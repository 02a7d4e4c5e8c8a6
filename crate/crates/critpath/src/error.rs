use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, IoError>;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: wrong magic 0x{found:08x}, expected 0x{expected:08x}")]
    WrongMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: truncated IDX file ({detail})")]
    TruncatedIdx { path: PathBuf, detail: String },

    #[error("{path}: malformed batch: {len} bytes is not a positive multiple of 3073")]
    MalformedBatch { path: PathBuf, len: usize },

    #[error("{path}: no dataset files found ({detail})")]
    MissingData { path: PathBuf, detail: String },

    #[error("unsupported channel count {0} for PNM export (1 or 3)")]
    UnsupportedChannels(usize),

    #[error("malformed PNM header: {0}")]
    BadPnm(String),

    #[error("{path}: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: critpath_core::Error,
    },

    #[error(transparent)]
    Core(#[from] critpath_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> IoError {
    let path = path.into();
    move |source| IoError::Io { path, source }
}
