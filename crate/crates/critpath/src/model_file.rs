use std::path::Path;

use critpath_core::codec::{decode_model, encode_model, model_digest};
use critpath_core::Model;

use crate::error::{io_err, IoError, Result};

/// Write a model file; returns its digest.
pub fn save_model(model: &Model<f32>, path: &Path) -> Result<String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, encode_model(model)).map_err(io_err(path))?;
    Ok(model_digest(model))
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_model(&bytes).map_err(|source| IoError::Model { path: path.into(), source })
}
