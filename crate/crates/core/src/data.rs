//! In-memory labelled image sets and per-channel standardization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputShape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean/std over pixel values scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    /// Statistics of raw `u8` pixels laid out NCHW.
    pub fn from_pixels(pixels: &[u8], shape: InputShape) -> Self {
        let plane = shape.height * shape.width;
        let mut sum = vec![0f64; shape.channels];
        let mut sq = vec![0f64; shape.channels];
        let mut count = vec![0usize; shape.channels];
        for (chunk_idx, chunk) in pixels.chunks(plane).enumerate() {
            let c = chunk_idx % shape.channels;
            for &p in chunk {
                let v = p as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
            count[c] += chunk.len();
        }
        let mut mean = Vec::with_capacity(shape.channels);
        let mut std = Vec::with_capacity(shape.channels);
        for c in 0..shape.channels {
            let n = count[c].max(1) as f64;
            let m = sum[c] / n;
            let var = (sq[c] / n - m * m).max(0.0);
            mean.push(m as f32);
            let s = num_traits::Float::sqrt(var) as f32;
            std.push(if s > 1e-6 { s } else { 1.0 });
        }
        Self { mean, std }
    }

    /// Identity mapping (values stay in `[0, 1]`).
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn apply(&self, pixel: u8, channel: usize) -> f32 {
        (pixel as f32 / 255.0 - self.mean[channel]) / self.std[channel]
    }

    /// Inverse of [`apply`](Self::apply) back onto the `[0, 1]` pixel scale.
    pub fn unapply(&self, value: f32, channel: usize) -> f32 {
        value * self.std[channel] + self.mean[channel]
    }
}

/// Standardized images `[N, C, H, W]` with labels. The raw bytes are kept so
/// the set can be re-standardized with another split's statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    raw: Vec<u8>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    normalization: Normalization,
}

impl Dataset {
    /// Build from raw NCHW pixel bytes. With `normalization = None` the set's
    /// own statistics are used.
    pub fn from_raw(
        raw: Vec<u8>,
        shape: InputShape,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        normalization: Option<Normalization>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::InvalidArgument("dataset has no samples".into()));
        }
        if raw.len() != n * shape.len() {
            return Err(Error::InvalidArgument(format!(
                "{} pixel bytes for {n} samples of {:?}",
                raw.len(),
                shape.dims()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..{num_classes}")));
        }
        let normalization = normalization.unwrap_or_else(|| Normalization::from_pixels(&raw, shape));
        if normalization.mean.len() != shape.channels || normalization.std.len() != shape.channels {
            return Err(Error::InvalidArgument("normalization channel count mismatch".into()));
        }
        let plane = shape.height * shape.width;
        let data = raw
            .iter()
            .enumerate()
            .map(|(i, &p)| normalization.apply(p, (i / plane) % shape.channels))
            .collect();
        let images = Tensor::new(vec![n, shape.channels, shape.height, shape.width], data)?;
        Ok(Self { images, raw, labels, num_classes, split, normalization })
    }

    /// Same samples standardized with `normalization` (e.g. train statistics on a test split).
    pub fn with_normalization(&self, normalization: Normalization) -> Result<Self> {
        Self::from_raw(
            self.raw.clone(),
            self.input_shape(),
            self.labels.clone(),
            self.num_classes,
            self.split,
            Some(normalization),
        )
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn raw_pixels(&self) -> &[u8] {
        &self.raw
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> InputShape {
        let s = self.images.shape();
        InputShape { channels: s[1], height: s[2], width: s[3] }
    }

    /// Sample indices of every class, ascending. Together they cover `0..len` once.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Image batch for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        self.images.gather(indices)
    }

    /// New dataset holding the given samples in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let sample = self.input_shape().len();
        let mut raw = Vec::with_capacity(indices.len() * sample);
        for &i in indices {
            raw.extend_from_slice(&self.raw[i * sample..(i + 1) * sample]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::from_raw(raw, self.input_shape(), labels, self.num_classes, self.split, Some(self.normalization.clone()))
    }
}

/// Exactly `k` samples per class, chosen and shuffled by a seeded RNG.
pub fn subset_per_class(dataset: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::InvalidArgument("k_per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k * dataset.num_classes());
    for (class, mut idx) in dataset.class_indices().into_iter().enumerate() {
        if idx.len() < k {
            return Err(Error::InsufficientSamples { class, needed: k, available: idx.len() });
        }
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..k]);
    }
    chosen.shuffle(&mut rng);
    dataset.select(&chosen)
}
