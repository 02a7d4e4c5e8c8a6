//! Dataset readers, model files, exports and the `critpath` command line.

pub mod cli;
pub mod datasets;
mod error;
pub mod export;
pub mod model_file;
pub mod pnm;

pub use error::{IoError, Result};
