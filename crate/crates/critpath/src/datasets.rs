//! MNIST (IDX) and CIFAR-10 (binary batch) readers.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use critpath_core::data::{Dataset, Normalization, Split};
use critpath_core::InputShape;
use flate2::read::GzDecoder;

use crate::error::{io_err, IoError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Whole file, transparently gunzipped when the name ends in `.gz`.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(io_err(path))?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| IoError::TruncatedIdx { path: path.into(), detail: format!("header ends before byte {}", at + 4) })
}

/// IDX image file: `(pixels, count, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IoError::WrongMagic { path: path.into(), expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(IoError::TruncatedIdx {
            path: path.into(),
            detail: format!("{need} pixel bytes declared, {} present", body.len()),
        });
    }
    Ok((body[..need].to_vec(), n, rows, cols))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IoError::WrongMagic { path: path.into(), expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(IoError::TruncatedIdx { path: path.into(), detail: format!("{n} labels declared, {} present", body.len()) });
    }
    Ok(body[..n].to_vec())
}

/// Raw (unstandardized) MNIST-style IDX pair.
pub fn load_mnist_raw(images: &Path, labels: &Path, split: Split, normalization: Option<Normalization>) -> Result<Dataset> {
    let (pixels, n, rows, cols) = parse_idx_images(&read_maybe_gz(images)?, images)?;
    let label_bytes = parse_idx_labels(&read_maybe_gz(labels)?, labels)?;
    if label_bytes.len() != n {
        return Err(IoError::CountMismatch { images: n, labels: label_bytes.len() });
    }
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let shape = InputShape { channels: 1, height: rows, width: cols };
    Ok(Dataset::from_raw(pixels, shape, labels, 10, split, normalization)?)
}

/// Load an IDX image/label pair, standardized with its own statistics.
pub fn load_mnist(images: &Path, labels: &Path) -> Result<Dataset> {
    let split = match images.file_name().and_then(|n| n.to_str()) {
        Some(n) if n.starts_with("t10k") || n.contains("test") => Split::Test,
        _ => Split::Train,
    };
    load_mnist_raw(images, labels, split, None)
}

fn find_first(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

/// Train and test splits from a directory with the standard file names
/// (optionally gzipped). Both splits are standardized with train statistics.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let pick = |stem: &str| {
        let plain = stem.to_string();
        let gz = format!("{stem}.gz");
        find_first(dir, &[&plain, &gz]).ok_or_else(|| IoError::MissingData { path: dir.into(), detail: format!("{stem}[.gz]") })
    };
    let train = load_mnist_raw(&pick("train-images-idx3-ubyte")?, &pick("train-labels-idx1-ubyte")?, Split::Train, None)?;
    let norm = train.normalization().clone();
    let test = load_mnist_raw(&pick("t10k-images-idx3-ubyte")?, &pick("t10k-labels-idx1-ubyte")?, Split::Test, Some(norm))?;
    Ok((train, test))
}

/// Records of one CIFAR-10 binary batch: `(pixels NCHW, labels)`.
pub fn parse_cifar10_batch(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(IoError::MalformedBatch { path: path.into(), len: bytes.len() });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

fn cifar_files(dir: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let base = if dir.join("cifar-10-batches-bin").is_dir() { dir.join("cifar-10-batches-bin") } else { dir.to_path_buf() };
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let files: Vec<PathBuf> = names.iter().map(|n| base.join(n)).filter(|p| p.is_file()).collect();
    if files.is_empty() {
        return Err(IoError::MissingData { path: base, detail: names.join(", ") });
    }
    Ok(files)
}

/// One split of CIFAR-10 from the binary batches in `dir`.
pub fn load_cifar10(dir: &Path, split: Split, normalization: Option<Normalization>) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in cifar_files(dir, split)? {
        let bytes = std::fs::read(&file).map_err(io_err(&file))?;
        let (p, l) = parse_cifar10_batch(&bytes, &file)?;
        pixels.extend(p);
        labels.extend(l);
    }
    Ok(Dataset::from_raw(pixels, InputShape::CIFAR10, labels, 10, split, normalization)?)
}

/// Train and test splits, both standardized with train statistics.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_cifar10(dir, Split::Train, None)?;
    let test = load_cifar10(dir, Split::Test, Some(train.normalization().clone()))?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: usize) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n as u32, 28, 28] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..n * 784).map(|i| (i % 256) as u8));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn mnist_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("train-images-idx3-ubyte");
        let lab = dir.path().join("train-labels-idx1-ubyte");
        std::fs::write(&img, idx_images(3)).unwrap();
        std::fs::write(&lab, idx_labels(&[1, 7, 9])).unwrap();
        let d = load_mnist(&img, &lab).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.labels(), &[1, 7, 9]);
        assert!(d.raw_pixels().iter().all(|&p| (p as f32 / 255.0) <= 1.0));

        // image file where labels are expected
        match load_mnist(&img, &img) {
            Err(IoError::WrongMagic { found, .. }) => assert_eq!(found, IDX_IMAGES_MAGIC),
            other => panic!("{other:?}"),
        }
        std::fs::write(&lab, idx_labels(&[1, 7])).unwrap();
        assert!(matches!(load_mnist(&img, &lab), Err(IoError::CountMismatch { images: 3, labels: 2 })));
    }

    #[test]
    fn cifar_batches() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 5;
        bytes[CIFAR_RECORD] = 3;
        bytes[1] = 200; // first red pixel of record 0
        let (p, l) = parse_cifar10_batch(&bytes, Path::new("x")).unwrap();
        assert_eq!(l, vec![5, 3]);
        assert_eq!(p.len(), 2 * 3072);
        assert_eq!(p[0], 200);
        assert!(matches!(
            parse_cifar10_batch(&vec![0; 3072], Path::new("x")),
            Err(IoError::MalformedBatch { len: 3072, .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        let d = load_cifar10(dir.path(), Split::Test, None).unwrap();
        assert_eq!(d.labels(), &[5, 3]);
        assert_eq!(d.images().shape(), &[2, 3, 32, 32]);
    }
}
