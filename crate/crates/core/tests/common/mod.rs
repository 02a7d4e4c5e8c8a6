#![allow(dead_code)]

use critpath_core::data::{Dataset, Split};
use critpath_core::{build_model, ArchSpec, InputShape, LayerParams, Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-amp..amp))
}

/// He-initialized model with random nonzero biases (all layers).
pub fn random_model(arch: ArchSpec, seed: u64) -> Model<f32> {
    let (arch, params, _) = build_model(arch, seed).unwrap().into_parts();
    let mut r = rng(seed ^ 0xB1A5);
    let params = params
        .into_iter()
        .map(|p| {
            p.map(|p| {
                let bias = Tensor::from_fn(p.bias.shape(), |_| r.random_range(-0.1f32..0.1));
                LayerParams { weight: p.weight, bias }
            })
        })
        .collect();
    Model::new(arch, params, "test").unwrap()
}

/// Small VGG-style net: three conv layers (2 blocks) and one hidden dense layer.
pub fn small_arch(channels: usize, side: usize, widths: [usize; 3], classes: usize) -> ArchSpec {
    ArchSpec::vgg_style(
        InputShape { channels, height: side, width: side },
        &[&[widths[0]], &[widths[1], widths[2]]],
        &[6],
        classes,
    )
}

/// Random pixels with `per_class` samples of each class, ordered by class.
pub fn random_dataset(shape: InputShape, classes: usize, per_class: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let n = classes * per_class;
    let pixels: Vec<u8> = (0..n * shape.len()).map(|_| r.random()).collect();
    let labels: Vec<usize> = (0..n).map(|i| i / per_class).collect();
    Dataset::from_raw(pixels, shape, labels, classes, Split::Train, None).unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}
