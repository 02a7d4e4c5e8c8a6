//! Per-filter, per-class contribution metrics.
//!
//! * mean absolute activation: spatial mean of `|A_i|`, averaged over class samples;
//! * contribution index: ℓ1 norm of `∂Z_n/∂A_i` over spatial positions,
//!   averaged over class-`n` samples (first-order Taylor coefficient);
//! * their elementwise product, used to rank filters for a class.
//!
//! `A_i` is the post-nonlinearity response of filter `i`. Reductions run in
//! (class, ascending sample index) order so results are reproducible.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Activation,
    Contribution,
    Product,
}

impl MapKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MapKind::Activation => "activation",
            MapKind::Contribution => "contribution",
            MapKind::Product => "product",
        }
    }
}

/// `[filters × classes]` matrix of non-negative scores for one conv layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterClassMap {
    /// 1-based conv layer index.
    pub conv: usize,
    pub kind: MapKind,
    pub filters: usize,
    pub classes: usize,
    /// Row-major: `values[filter * classes + class]`.
    pub values: Vec<f64>,
    pub samples_per_class: Vec<usize>,
    pub per_class_cap: usize,
    pub seed: u64,
}

impl FilterClassMap {
    pub fn get(&self, filter: usize, class: usize) -> f64 {
        self.values[filter * self.classes + class]
    }

    pub fn row(&self, filter: usize) -> &[f64] {
        &self.values[filter * self.classes..(filter + 1) * self.classes]
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        (0..self.filters).map(|f| self.get(f, class)).collect()
    }
}

/// Sample selection and batching for map computation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub per_class_cap: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { per_class_cap: 500, seed: 0, batch_size: 64 }
    }
}

/// Activation and contribution maps of one layer, computed from the same samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMaps {
    pub activation: FilterClassMap,
    pub contribution: FilterClassMap,
}

impl LayerMaps {
    pub fn product(&self) -> FilterClassMap {
        product_score_map(&self.activation, &self.contribution).expect("maps share a layer and shape")
    }
}

/// Per-class sample indices: at most `cap` per class, seeded choice, ascending order.
pub fn select_samples(dataset: &Dataset, cap: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if cap == 0 {
        return Err(Error::InvalidArgument("per_class_cap must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(dataset.num_classes());
    for (class, mut idx) in dataset.class_indices().into_iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::EmptyClass { class });
        }
        if idx.len() > cap {
            idx.shuffle(&mut rng);
            idx.truncate(cap);
            idx.sort_unstable();
        }
        out.push(idx);
    }
    Ok(out)
}

fn check_convs<T: Scalar>(model: &Model<T>, convs: &[usize]) -> Result<Vec<usize>> {
    if convs.is_empty() {
        return Err(Error::InvalidArgument("no conv layers requested".into()));
    }
    convs.iter().map(|&c| model.arch().activation_position(c)).collect()
}

fn check_classes<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<()> {
    if dataset.num_classes() != model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model scores {}",
            dataset.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// Add `reduce(filter plane)` of every sample in `t` into `acc[filter]`.
fn accumulate_planes<T: Scalar>(t: &Tensor<T>, acc: &mut [f64], reduce: impl Fn(&[T]) -> f64) {
    let s = t.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    for sample in t.data().chunks_exact(c * hw) {
        for (f, plane) in sample.chunks_exact(hw).enumerate() {
            acc[f] += reduce(plane);
        }
    }
}

fn mean_abs<T: Scalar>(plane: &[T]) -> f64 {
    plane.iter().map(|v| v.abs().to_f64_lossy()).sum::<f64>() / plane.len() as f64
}

fn l1<T: Scalar>(plane: &[T]) -> f64 {
    plane.iter().map(|v| v.abs().to_f64_lossy()).sum()
}

struct MapBuilder {
    conv: usize,
    filters: usize,
    classes: usize,
    sums: Vec<f64>,
}

impl MapBuilder {
    fn new<T: Scalar>(model: &Model<T>, conv: usize) -> Result<Self> {
        let filters = model.arch().conv_filters(conv)?;
        let classes = model.num_classes();
        Ok(Self { conv, filters, classes, sums: vec![0.0; filters * classes] })
    }

    fn add_class(&mut self, class: usize, per_filter: &[f64]) {
        for (f, v) in per_filter.iter().enumerate() {
            self.sums[f * self.classes + class] += v;
        }
    }

    fn finish(self, kind: MapKind, counts: &[usize], cfg: &AnalysisConfig) -> FilterClassMap {
        let mut values = self.sums;
        for f in 0..self.filters {
            for (c, &n) in counts.iter().enumerate() {
                values[f * self.classes + c] /= n as f64;
            }
        }
        FilterClassMap {
            conv: self.conv,
            kind,
            filters: self.filters,
            classes: self.classes,
            values,
            samples_per_class: counts.to_vec(),
            per_class_cap: cfg.per_class_cap,
            seed: cfg.seed,
        }
    }
}

/// Mean absolute activation maps for several conv layers (forward passes only).
pub fn activation_maps<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    convs: &[usize],
    cfg: &AnalysisConfig,
) -> Result<Vec<FilterClassMap>> {
    check_classes(model, dataset)?;
    let positions = check_convs(model, convs)?;
    let samples = select_samples(dataset, cfg.per_class_cap, cfg.seed)?;
    let mut builders: Vec<MapBuilder> = convs.iter().map(|&c| MapBuilder::new(model, c)).collect::<Result<_>>()?;
    let end = positions.iter().max().copied().unwrap_or(0) + 1;
    for (class, idx) in samples.iter().enumerate() {
        let mut acc: Vec<Vec<f64>> = builders.iter().map(|b| vec![0.0; b.filters]).collect();
        for chunk in idx.chunks(cfg.batch_size.max(1)) {
            let batch: Tensor<T> = dataset.batch(chunk).cast();
            model.forward_range(&batch, end, |i, x| {
                for (slot, &p) in positions.iter().enumerate() {
                    if p == i {
                        accumulate_planes(x, &mut acc[slot], mean_abs);
                    }
                }
                Ok(())
            })?;
        }
        for (b, a) in builders.iter_mut().zip(&acc) {
            b.add_class(class, a);
        }
    }
    let counts: Vec<usize> = samples.iter().map(Vec::len).collect();
    Ok(builders.into_iter().map(|b| b.finish(MapKind::Activation, &counts, cfg)).collect())
}

/// Activation and contribution maps for several conv layers in one pass:
/// each class-`c` batch is run forward once and backward once with the
/// logit direction `e_c`.
pub fn layer_maps<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    convs: &[usize],
    cfg: &AnalysisConfig,
) -> Result<Vec<LayerMaps>> {
    check_classes(model, dataset)?;
    let positions = check_convs(model, convs)?;
    let samples = select_samples(dataset, cfg.per_class_cap, cfg.seed)?;
    let mut act: Vec<MapBuilder> = convs.iter().map(|&c| MapBuilder::new(model, c)).collect::<Result<_>>()?;
    let mut contrib: Vec<MapBuilder> = convs.iter().map(|&c| MapBuilder::new(model, c)).collect::<Result<_>>()?;
    let end = model.arch().layers.len();
    let stop = positions.iter().min().copied().unwrap_or(0);
    let classes = model.num_classes();

    for (class, idx) in samples.iter().enumerate() {
        let mut act_acc: Vec<Vec<f64>> = act.iter().map(|b| vec![0.0; b.filters]).collect();
        let mut grad_acc: Vec<Vec<f64>> = act.iter().map(|b| vec![0.0; b.filters]).collect();
        for chunk in idx.chunks(cfg.batch_size.max(1)) {
            let batch: Tensor<T> = dataset.batch(chunk).cast();
            let (_, caches) = model.forward_trace(&batch, end)?;
            for (slot, &p) in positions.iter().enumerate() {
                accumulate_planes(caches[p + 1].input(), &mut act_acc[slot], mean_abs);
            }
            let seed = Tensor::from_fn(&[chunk.len(), classes], |i| {
                if i % classes == class {
                    T::one()
                } else {
                    T::zero()
                }
            });
            model.backward_trace(&caches, seed, stop, false, |i, g| {
                for (slot, &p) in positions.iter().enumerate() {
                    if p == i {
                        accumulate_planes(g, &mut grad_acc[slot], l1);
                    }
                }
            })?;
        }
        for (b, a) in act.iter_mut().zip(&act_acc) {
            b.add_class(class, a);
        }
        for (b, a) in contrib.iter_mut().zip(&grad_acc) {
            b.add_class(class, a);
        }
    }
    let counts: Vec<usize> = samples.iter().map(Vec::len).collect();
    Ok(act
        .into_iter()
        .zip(contrib)
        .map(|(a, c)| LayerMaps {
            activation: a.finish(MapKind::Activation, &counts, cfg),
            contribution: c.finish(MapKind::Contribution, &counts, cfg),
        })
        .collect())
}

/// Gradient of logit `class` with respect to the post-activation map of conv
/// layer `conv`, per sample: shape `[N, C, H, W]`.
pub fn logit_gradient<T: Scalar>(model: &Model<T>, batch: &Tensor<T>, conv: usize, class: usize) -> Result<Tensor<T>> {
    let classes = model.num_classes();
    if class >= classes {
        return Err(Error::InvalidArgument(format!("class {class} outside 0..{classes}")));
    }
    let p = model.arch().activation_position(conv)?;
    let (_, caches) = model.forward_trace(batch, model.arch().layers.len())?;
    let seed = Tensor::from_fn(&[batch.batch_size(), classes], |i| if i % classes == class { T::one() } else { T::zero() });
    let (grad, _) = model.backward_trace(&caches, seed, p + 1, false, |_, _| {})?;
    Ok(grad)
}

/// Entry `(i, c)`: mean over class-`c` samples of the spatial mean of `|A_i|`.
pub fn mean_abs_activation_map<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    conv: usize,
    cfg: &AnalysisConfig,
) -> Result<FilterClassMap> {
    Ok(activation_maps(model, dataset, &[conv], cfg)?.remove(0))
}

/// Entry `(i, n)`: mean over class-`n` samples of `‖∂Z_n/∂A_i‖₁`.
pub fn contribution_index_map<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    conv: usize,
    cfg: &AnalysisConfig,
) -> Result<FilterClassMap> {
    Ok(layer_maps(model, dataset, &[conv], cfg)?.remove(0).contribution)
}

/// Elementwise product of an activation map and a contribution map.
pub fn product_score_map(act: &FilterClassMap, contrib: &FilterClassMap) -> Result<FilterClassMap> {
    if act.conv != contrib.conv || act.filters != contrib.filters || act.classes != contrib.classes {
        return Err(Error::InvalidArgument(format!(
            "cannot combine conv {} [{}x{}] with conv {} [{}x{}]",
            act.conv, act.filters, act.classes, contrib.conv, contrib.filters, contrib.classes
        )));
    }
    Ok(FilterClassMap {
        kind: MapKind::Product,
        values: act.values.iter().zip(&contrib.values).map(|(a, b)| a * b).collect(),
        ..act.clone()
    })
}

/// Population standard deviation over mean (coefficient of variation, ε-guarded).
pub fn normalized_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    num_traits::Float::sqrt(var) / (mean + 1e-8)
}

/// Mean normalized STD of per-class mean activations, one value per conv layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStd {
    /// `values[conv - 1]`.
    pub values: Vec<f64>,
}

/// Layer value = mean over filters of [`normalized_std`] of the filter's activation-map row.
pub fn layer_std_from_map(map: &FilterClassMap) -> f64 {
    (0..map.filters).map(|f| normalized_std(map.row(f))).sum::<f64>() / map.filters as f64
}

pub fn layer_activation_std<T: Scalar>(model: &Model<T>, dataset: &Dataset, cfg: &AnalysisConfig) -> Result<LayerStd> {
    let convs: Vec<usize> = (1..=model.arch().num_conv()).collect();
    let maps = activation_maps(model, dataset, &convs, cfg)?;
    Ok(LayerStd { values: maps.iter().map(layer_std_from_map).collect() })
}

/// The `k` filters with the largest value for `class`, descending; ties go to
/// the lower filter index.
pub fn top_filters(map: &FilterClassMap, class: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > map.filters {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={}", map.filters)));
    }
    if class >= map.classes {
        return Err(Error::InvalidArgument(format!("class {class} outside 0..{}", map.classes)));
    }
    let mut idx: Vec<usize> = (0..map.filters).collect();
    idx.sort_by(|&a, &b| {
        map.get(b, class)
            .partial_cmp(&map.get(a, class))
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

/// Jaccard index `|A ∩ B| / |A ∪ B|`.
pub fn overlap(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("overlap of an empty set".into()));
    }
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    let inter = a.intersection(&b).count();
    let union = a.union(&b).count();
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>, filters: usize, classes: usize) -> FilterClassMap {
        FilterClassMap {
            conv: 1,
            kind: MapKind::Product,
            filters,
            classes,
            values,
            samples_per_class: vec![1; classes],
            per_class_cap: 1,
            seed: 0,
        }
    }

    #[test]
    fn top_filters_order_and_ties() {
        let m = map(vec![0.1, 0.9, 0.5], 3, 1);
        assert_eq!(top_filters(&m, 0, 2).unwrap(), vec![1, 2]);
        let eq = map(vec![0.3; 4], 4, 1);
        assert_eq!(top_filters(&eq, 0, 3).unwrap(), vec![0, 1, 2]);
        assert!(top_filters(&m, 0, 0).is_err());
        assert!(top_filters(&m, 0, 4).is_err());
    }

    #[test]
    fn overlap_cases() {
        assert_eq!(overlap(&[1, 2], &[2, 1]).unwrap(), 1.0);
        assert_eq!(overlap(&[1, 2], &[3]).unwrap(), 0.0);
        assert_eq!(overlap(&[1, 2, 3], &[2, 3, 4]).unwrap(), 0.5);
        assert!(overlap(&[], &[1]).is_err());
    }

    #[test]
    fn normalized_std_cases() {
        assert!(normalized_std(&[0.7; 10]).abs() < 1e-12);
        for m in [0.01, 1.0, 250.0] {
            let mut v = vec![0.0; 10];
            v[9] = m;
            // population std of one spike m among ten values is 0.3m, mean 0.1m
            let expected = 0.3 * m / (0.1 * m + 1e-8);
            assert!((normalized_std(&v) - expected).abs() < 1e-9, "{m}");
        }
    }

    #[test]
    fn two_by_two_layer_std_by_hand() {
        // filter 0: per-class means [1, 3] -> std 1, mean 2 -> 0.5
        // filter 1: [2, 2] -> 0
        let m = map(vec![1.0, 3.0, 2.0, 2.0], 2, 2);
        assert!((layer_std_from_map(&m) - 0.25).abs() < 1e-8);
    }

    #[test]
    fn product_checks_shape() {
        let a = map(vec![2.0, 0.0], 2, 1);
        let b = map(vec![0.5, 7.0], 2, 1);
        let p = product_score_map(&a, &b).unwrap();
        assert_eq!(p.values, vec![1.0, 0.0]);
        assert_eq!(p.kind, MapKind::Product);
        let c = map(vec![0.5, 7.0, 1.0], 3, 1);
        assert!(product_score_map(&a, &c).is_err());
        let mut d = b.clone();
        d.conv = 2;
        assert!(product_score_map(&a, &d).is_err());
    }
}
