//! Binary PGM/PPM output for synthesized patterns.

use std::path::Path;

use critpath_core::{Scalar, Tensor};

use crate::error::{io_err, IoError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PnmHeader {
    /// 1 for P5 (gray), 3 for P6 (RGB).
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub maxval: usize,
}

/// Min-max scale to 0..=255; a constant input maps to 128.
pub fn to_bytes<T: Scalar>(values: &[T]) -> Vec<u8> {
    let v: Vec<f64> = values.iter().map(|x| x.to_f64_lossy()).collect();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; v.len()];
    }
    v.iter().map(|x| ((x - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Encode a `[1, C, H, W]` (or `[C, H, W]`) pattern with C = 1 or 3.
pub fn encode_pnm<T: Scalar>(pattern: &Tensor<T>) -> Result<Vec<u8>> {
    let dims = pattern.shape();
    let [c, h, w] = match *dims {
        [1, c, h, w] | [c, h, w] => [c, h, w],
        _ => return Err(IoError::BadPnm(format!("pattern shape {dims:?}"))),
    };
    let bytes = to_bytes(pattern.data());
    let (magic, body) = match c {
        1 => ("P5", bytes),
        3 => {
            let plane = h * w;
            let mut rgb = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                rgb.extend([bytes[p], bytes[plane + p], bytes[2 * plane + p]]);
            }
            ("P6", rgb)
        }
        other => return Err(IoError::UnsupportedChannels(other)),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(body);
    Ok(out)
}

pub fn export_pattern_image<T: Scalar>(pattern: &Tensor<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pnm(pattern)?).map_err(io_err(path))
}

/// Parse a P5/P6 header; returns it with the pixel bytes.
pub fn parse_pnm(bytes: &[u8]) -> Result<(PnmHeader, &[u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::BadPnm("header ends early".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| IoError::BadPnm(e.to_string()))?);
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(IoError::BadPnm(format!("magic {other:?}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|e| IoError::BadPnm(format!("{s:?}: {e}")));
    let header = PnmHeader { channels, width: num(fields[1])?, height: num(fields[2])?, maxval: num(fields[3])? };
    // exactly one whitespace byte separates the header from the raster
    let body = bytes.get(pos + 1..).unwrap_or_default();
    if body.len() != channels * header.width * header.height {
        return Err(IoError::BadPnm(format!("raster has {} bytes", body.len())));
    }
    Ok((header, body))
}
