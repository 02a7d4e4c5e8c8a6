//! Binary model format.
//!
//! ```text
//! "CPDM" | version: u32 LE | json_len: u32 LE | architecture JSON (UTF-8)
//! | for each parameterized layer in order: weight f32 LE..., bias f32 LE...
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::layer::{describe, LayerKind, LayerParams};
use crate::model::{ArchSpec, InputShape, Model};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CPDM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArchDocument {
    input: InputShape,
    layers: Vec<LayerKind>,
    num_classes: usize,
    provenance: String,
}

pub fn encode_model(model: &Model<f32>) -> Vec<u8> {
    let arch = model.arch();
    let doc = ArchDocument {
        input: arch.input,
        layers: arch.layers.clone(),
        num_classes: arch.num_classes,
        provenance: model.provenance().into(),
    };
    let json = serde_json::to_vec(&doc).expect("architecture document serializes");
    let payload: usize = model.params().iter().flatten().map(LayerParams::len).sum();
    let mut out = Vec::with_capacity(12 + json.len() + 4 * payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params().iter().flatten() {
        for v in p.weight.data().iter().chain(p.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Model<f32>> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic { found: bytes[..bytes.len().min(4)].to_vec() }.into());
    }
    if bytes.len() < 12 {
        return Err(FormatError::TruncatedHeader.into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch { found: version, supported: FORMAT_VERSION }.into());
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + json_len).ok_or(FormatError::TruncatedHeader)?;
    let doc: ArchDocument = serde_json::from_slice(json).map_err(|e| FormatError::Json(format!("{e}")))?;
    let arch = ArchSpec { input: doc.input, layers: doc.layers, num_classes: doc.num_classes };
    arch.validate().map_err(|e| FormatError::Inconsistent(format!("{e}")))?;

    let mut cursor = &bytes[12 + json_len..];
    let mut params = Vec::with_capacity(arch.layers.len());
    for (i, kind) in arch.layers.iter().enumerate() {
        let Some((ws, bs)) = kind.param_shapes() else {
            params.push(None);
            continue;
        };
        let mut read = |shape: &[usize], what: &str| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if cursor.len() < 4 * n {
                return Err(FormatError::TruncatedPayload { layer: format!("{} {what}", describe(i, kind)) }.into());
            }
            let (head, rest) = cursor.split_at(4 * n);
            cursor = rest;
            let data = head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::new(shape.to_vec(), data)
                .map_err(|e| FormatError::Inconsistent(format!("{} {what}: {e}", describe(i, kind))).into())
        };
        let weight = read(&ws, "weight")?;
        let bias = read(&bs, "bias")?;
        params.push(Some(LayerParams { weight, bias }));
    }
    if !cursor.is_empty() {
        return Err(FormatError::Inconsistent(format!("{} trailing bytes after last tensor", cursor.len())).into());
    }
    Model::new(arch, params, doc.provenance).map_err(|e| match e {
        Error::Format(f) => Error::Format(f),
        other => FormatError::Inconsistent(format!("{other}")).into(),
    })
}

/// Lowercase hex SHA-256 of the encoded model.
pub fn model_digest(model: &Model<f32>) -> String {
    let hash = Sha256::digest(encode_model(model));
    let mut s = String::with_capacity(64);
    for b in hash.iter() {
        let _ = core::fmt::Write::write_fmt(&mut s, format_args!("{b:02x}"));
    }
    s
}
