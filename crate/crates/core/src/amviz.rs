//! Activation maximization: gradient ascent on the input to maximize one
//! filter's spatially averaged pre-nonlinearity response.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Initial noise is uniform in `[-init_amplitude, init_amplitude]` around
    /// the (standardized) dataset mean, i.e. around zero.
    pub init_amplitude: f64,
    pub l2_decay: f64,
    pub seed: u64,
}

impl Default for AmConfig {
    fn default() -> Self {
        Self { steps: 200, step_size: 0.1, init_amplitude: 0.1, l2_decay: 1e-4, seed: 0 }
    }
}

impl AmConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.step_size) || !ok(self.init_amplitude) || !ok(self.l2_decay) {
            return Err(Error::InvalidArgument(
                "step_size, init_amplitude and l2_decay must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmResult<T = f32> {
    /// Synthesized input `[1, C, H, W]`.
    pub pattern: Tensor<T>,
    /// Objective before each step and after the last (`steps + 1` values).
    pub trace: Vec<T>,
}

/// Seeded starting point for one filter. Independent of which other filters
/// are optimized alongside it.
pub fn am_init<T: Scalar>(model: &Model<T>, conv: usize, filter: usize, config: &AmConfig) -> Tensor<T> {
    let seed = config
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((conv as u64) << 32) ^ filter as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = Vec::with_capacity(4);
    shape.push(1);
    shape.extend(model.arch().input.dims());
    let a = config.init_amplitude;
    Tensor::from_fn(&shape, |_| {
        let u: f64 = rng.random::<f64>();
        T::lit((2.0 * u - 1.0) * a)
    })
}

/// Gradient ascent `X ← X + η·∂f/∂X − η·λ·X` for a single filter.
pub fn activation_maximization<T: Scalar>(
    model: &Model<T>,
    conv: usize,
    filter: usize,
    config: &AmConfig,
) -> Result<AmResult<T>> {
    Ok(activation_maximization_batch(model, conv, &[filter], config)?.remove(0))
}

/// Several filters of one layer optimized side by side in one batch. Each
/// result equals the corresponding single-filter run.
pub fn activation_maximization_batch<T: Scalar>(
    model: &Model<T>,
    conv: usize,
    filters: &[usize],
    config: &AmConfig,
) -> Result<Vec<AmResult<T>>> {
    config.validate()?;
    let position = model.arch().conv_position(conv)?;
    let count = model.arch().conv_filters(conv)?;
    if let Some(&bad) = filters.iter().find(|&&f| f >= count) {
        return Err(Error::InvalidArgument(format!("filter {bad} outside 0..{count} of conv {conv}")));
    }
    if filters.is_empty() {
        return Ok(Vec::new());
    }
    let sample_len = model.arch().input.len();
    let mut data = Vec::with_capacity(filters.len() * sample_len);
    for &f in filters {
        data.extend_from_slice(am_init(model, conv, f, config).data());
    }
    let mut shape = Vec::with_capacity(4);
    shape.push(filters.len());
    shape.extend(model.arch().input.dims());
    let mut x = Tensor::from_parts(shape, data);

    let eta = T::lit(config.step_size);
    let decay = T::lit(config.step_size * config.l2_decay);
    let mut traces: Vec<Vec<T>> = filters.iter().map(|_| Vec::with_capacity(config.steps + 1)).collect();

    for step in 0..=config.steps {
        let (out, caches) = model.forward_trace(&x, position + 1).map_err(|e| match e {
            Error::NonFinite { .. } => Error::AmDiverged { step },
            other => other,
        })?;
        let s = out.shape();
        let hw = s[2] * s[3];
        let inv_hw = T::one() / T::lit(hw as f64);
        for (j, &f) in filters.iter().enumerate() {
            let plane = &out.sample(j)[f * hw..(f + 1) * hw];
            traces[j].push(plane.iter().copied().sum::<T>() * inv_hw);
        }
        if step == config.steps {
            break;
        }
        let per_sample = s[1] * hw;
        let mut seed = Tensor::zeros(s);
        for (j, &f) in filters.iter().enumerate() {
            let base = j * per_sample + f * hw;
            seed.data_mut()[base..base + hw].iter_mut().for_each(|v| *v = inv_hw);
        }
        let (grad, _) = model
            .backward_trace(&caches, seed, 0, false, |_, _| {})
            .map_err(|_| Error::AmDiverged { step })?;
        for (xi, &gi) in x.data_mut().iter_mut().zip(grad.data()) {
            *xi = *xi + eta * gi - decay * *xi;
        }
        if !x.is_finite() {
            return Err(Error::AmDiverged { step: step + 1 });
        }
    }

    Ok(traces
        .into_iter()
        .enumerate()
        .map(|(j, trace)| AmResult { pattern: x.gather(&[j]), trace })
        .collect())
}
