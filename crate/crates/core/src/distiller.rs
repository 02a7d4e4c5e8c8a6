//! Critical-path selection and structural distillation.
//!
//! For a target class, each distilled conv layer keeps the `ceil(ρ·I)` filters
//! with the highest score for that class. [`distill`] physically removes the
//! other filters (and the matching input slices of the next parameterized
//! layer) and zeroes the logit biases; every surviving weight is copied
//! unchanged. [`masked_forward`] evaluates the same network by zeroing the
//! dropped activation maps instead, which is the reference for equivalence.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::analysis::{layer_maps, top_filters, AnalysisConfig, FilterClassMap, LayerMaps};
use crate::codec::model_digest;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::{describe, LayerKind, LayerParams};
use crate::model::{ArchSpec, Logits, Model};
use crate::tensor::{Scalar, Tensor};

/// Which map ranks the filters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionScore {
    #[default]
    Product,
    Activation,
    Contribution,
}

impl SelectionScore {
    pub fn pick<'a>(&self, maps: &'a LayerMaps, product: &'a FilterClassMap) -> &'a FilterClassMap {
        match self {
            SelectionScore::Product => product,
            SelectionScore::Activation => &maps.activation,
            SelectionScore::Contribution => &maps.contribution,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub target_class: usize,
    pub reserved_ratio: f64,
    /// 1-based conv indices; a contiguous run ending at the last conv layer.
    pub distill_layers: Vec<usize>,
    pub analysis: AnalysisConfig,
    pub score: SelectionScore,
}

impl DistillConfig {
    /// Defaults for a model: the last six conv layers when there are at least
    /// twelve, otherwise the last half (rounded up).
    pub fn for_arch(arch: &ArchSpec, target_class: usize, reserved_ratio: f64) -> Self {
        Self {
            target_class,
            reserved_ratio,
            distill_layers: default_distill_layers(arch.num_conv()),
            analysis: AnalysisConfig::default(),
            score: SelectionScore::Product,
        }
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        if !(self.reserved_ratio > 0.0 && self.reserved_ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "reserved ratio {} outside (0, 1]",
                self.reserved_ratio
            )));
        }
        if self.target_class >= arch.num_classes {
            return Err(Error::InvalidArgument(format!(
                "target class {} outside 0..{}",
                self.target_class, arch.num_classes
            )));
        }
        check_layer_run(&self.distill_layers, arch.num_conv())
    }
}

pub fn default_distill_layers(num_conv: usize) -> Vec<usize> {
    let count = if num_conv >= 12 { 6 } else { num_conv.div_ceil(2) };
    (num_conv + 1 - count.min(num_conv)..=num_conv).collect()
}

fn check_layer_run(layers: &[usize], num_conv: usize) -> Result<()> {
    let Some(&first) = layers.first() else {
        return Err(Error::InvalidArgument("no distill layers".into()));
    };
    let contiguous = layers.iter().enumerate().all(|(i, &c)| c == first + i);
    if first == 0 || !contiguous || *layers.last().expect("nonempty") != num_conv {
        return Err(Error::InvalidArgument(format!(
            "distill layers {layers:?} must be a contiguous run ending at conv {num_conv}"
        )));
    }
    Ok(())
}

/// `ceil(ratio · filters)`, at least one.
pub fn reserved_count(ratio: f64, filters: usize) -> usize {
    // the small slack keeps products such as 0.1 · 130 = 13.000000000000002 at 13
    let k = num_traits::Float::ceil(ratio * filters as f64 - 1e-9);
    (k.max(1.0) as usize).min(filters)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReservedLayer {
    pub conv: usize,
    /// Filter count of the source layer.
    pub filters: usize,
    /// Kept filter indices, ascending.
    pub reserved: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPath {
    pub target_class: usize,
    pub reserved_ratio: f64,
    pub score: SelectionScore,
    pub layers: Vec<ReservedLayer>,
    pub model_digest: String,
    pub per_class_cap: usize,
    pub seed: u64,
    /// Score maps the selection was made from (not serialized).
    #[serde(skip)]
    pub maps: Vec<FilterClassMap>,
}

impl CriticalPath {
    pub fn layer(&self, conv: usize) -> Option<&ReservedLayer> {
        self.layers.iter().find(|l| l.conv == conv)
    }
}

/// Compute maps for the configured layers and pick the critical path.
pub fn select_critical_path(model: &Model<f32>, dataset: &Dataset, config: &DistillConfig) -> Result<CriticalPath> {
    config.validate(model.arch())?;
    if !dataset.labels().contains(&config.target_class) {
        return Err(Error::EmptyClass { class: config.target_class });
    }
    let maps = layer_maps(model, dataset, &config.distill_layers, &config.analysis)?;
    critical_path_from_maps(&maps, config, model_digest(model))
}

/// Critical path from precomputed maps (one entry per distill layer, in order).
pub fn critical_path_from_maps(maps: &[LayerMaps], config: &DistillConfig, digest: String) -> Result<CriticalPath> {
    if maps.len() != config.distill_layers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} maps for {} distill layers",
            maps.len(),
            config.distill_layers.len()
        )));
    }
    if !(config.reserved_ratio > 0.0 && config.reserved_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("reserved ratio {} outside (0, 1]", config.reserved_ratio)));
    }
    let mut layers = Vec::with_capacity(maps.len());
    let mut used = Vec::with_capacity(maps.len());
    for (lm, &conv) in maps.iter().zip(&config.distill_layers) {
        let product = lm.product();
        let map = config.score.pick(lm, &product);
        if map.conv != conv {
            return Err(Error::InvalidArgument(format!("map for conv {} given for conv {conv}", map.conv)));
        }
        let k = reserved_count(config.reserved_ratio, map.filters);
        let mut reserved = top_filters(map, config.target_class, k)?;
        reserved.sort_unstable();
        layers.push(ReservedLayer { conv, filters: map.filters, reserved });
        used.push(map.clone());
    }
    Ok(CriticalPath {
        target_class: config.target_class,
        reserved_ratio: config.reserved_ratio,
        score: config.score,
        layers,
        model_digest: digest,
        per_class_cap: config.analysis.per_class_cap,
        seed: config.analysis.seed,
        maps: used,
    })
}

/// Architecture that [`distill`] produces when `distill_layers` keep
/// [`reserved_count`]`(ratio, filters)` filters each.
pub fn pruned_arch(arch: &ArchSpec, distill_layers: &[usize], ratio: f64) -> Result<ArchSpec> {
    check_layer_run(distill_layers, arch.num_conv())?;
    let shapes = arch.validate()?;
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut channels: Option<usize> = None;
    let mut features: Option<usize> = None;
    let mut conv = 0;
    for (i, kind) in arch.layers.iter().enumerate() {
        match *kind {
            LayerKind::Conv3x3 { in_channels, out_channels } => {
                conv += 1;
                let outs = if distill_layers.contains(&conv) { reserved_count(ratio, out_channels) } else { out_channels };
                layers.push(LayerKind::Conv3x3 { in_channels: channels.unwrap_or(in_channels), out_channels: outs });
                channels = distill_layers.contains(&conv).then_some(outs);
            }
            LayerKind::Flatten => {
                let input = if i == 0 { arch.input.dims().to_vec() } else { shapes[i - 1].clone() };
                features = channels.take().map(|c| c * input[1] * input[2]);
                layers.push(LayerKind::Flatten);
            }
            LayerKind::Dense { in_features, out_features } => {
                layers.push(LayerKind::Dense { in_features: features.take().unwrap_or(in_features), out_features });
            }
            LayerKind::Relu | LayerKind::MaxPool2x2 => layers.push(*kind),
        }
    }
    Ok(ArchSpec { input: arch.input, layers, num_classes: arch.num_classes })
}

/// A structurally pruned model plus what it was distilled from.
#[derive(Clone, Debug, PartialEq)]
pub struct DistilledModel {
    pub model: Model<f32>,
    pub target_class: usize,
    pub reserved_ratio: f64,
    pub source_digest: String,
}

/// Kept output channels per conv layer position, validated against the model.
fn keep_plan<T: Scalar>(model: &Model<T>, path: &CriticalPath) -> Result<Vec<Option<Vec<usize>>>> {
    let arch = model.arch();
    let convs: Vec<usize> = path.layers.iter().map(|l| l.conv).collect();
    check_layer_run(&convs, arch.num_conv())?;
    let mut plan = vec![None; arch.layers.len()];
    for layer in &path.layers {
        let pos = arch.conv_position(layer.conv)?;
        let filters = arch.conv_filters(layer.conv)?;
        let bad = |m: String| Err(Error::InvalidArgument(format!("{}: {m}", describe(pos, &arch.layers[pos]))));
        if layer.filters != filters {
            return bad(format!("path expects {} filters, model has {filters}", layer.filters));
        }
        if layer.reserved.is_empty() {
            return bad("no reserved filters".into());
        }
        if layer.reserved.windows(2).any(|w| w[0] >= w[1]) {
            return bad("reserved indices must be strictly ascending".into());
        }
        if layer.reserved.last().is_some_and(|&f| f >= filters) {
            return bad(format!("reserved index outside 0..{filters}"));
        }
        plan[pos] = Some(layer.reserved.clone());
    }
    Ok(plan)
}

/// Physically remove the filters outside the critical path and zero the logit biases.
pub fn distill(model: &Model<f32>, path: &CriticalPath) -> Result<DistilledModel> {
    let plan = keep_plan(model, path)?;
    let arch = model.arch();
    let shapes = arch.validate()?;
    let last = arch.layers.len() - 1;

    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut params = Vec::with_capacity(arch.layers.len());
    // original channel (or feature) indices present in the running tensor; None = all
    let mut channels: Option<Vec<usize>> = None;
    let mut features: Option<Vec<usize>> = None;

    for (i, kind) in arch.layers.iter().enumerate() {
        let p = model.params()[i].as_ref();
        match *kind {
            LayerKind::Conv3x3 { in_channels, out_channels } => {
                let p = p.expect("validated model");
                let ins: Vec<usize> = channels.clone().unwrap_or_else(|| (0..in_channels).collect());
                let outs: Vec<usize> = plan[i].clone().unwrap_or_else(|| (0..out_channels).collect());
                let w = p.weight.data();
                let mut weight = Vec::with_capacity(outs.len() * ins.len() * 9);
                for &o in &outs {
                    for &c in &ins {
                        let base = (o * in_channels + c) * 9;
                        weight.extend_from_slice(&w[base..base + 9]);
                    }
                }
                let bias = outs.iter().map(|&o| p.bias.data()[o]).collect();
                layers.push(LayerKind::Conv3x3 { in_channels: ins.len(), out_channels: outs.len() });
                params.push(Some(LayerParams {
                    weight: Tensor::new(vec![outs.len(), ins.len(), 3, 3], weight)?,
                    bias: Tensor::new(vec![outs.len()], bias)?,
                }));
                channels = plan[i].clone();
            }
            LayerKind::Flatten => {
                let input = if i == 0 { arch.input.dims().to_vec() } else { shapes[i - 1].clone() };
                let hw = input[1..].iter().product::<usize>();
                features = channels
                    .take()
                    .map(|chs| chs.iter().flat_map(|&c| c * hw..(c + 1) * hw).collect());
                layers.push(LayerKind::Flatten);
                params.push(None);
            }
            LayerKind::Dense { in_features, out_features } => {
                let p = p.expect("validated model");
                let ins: Vec<usize> = features.take().unwrap_or_else(|| (0..in_features).collect());
                let w = p.weight.data();
                let mut weight = Vec::with_capacity(out_features * ins.len());
                for o in 0..out_features {
                    let row = &w[o * in_features..(o + 1) * in_features];
                    weight.extend(ins.iter().map(|&f| row[f]));
                }
                let bias = if i == last { vec![0.0; out_features] } else { p.bias.data().to_vec() };
                layers.push(LayerKind::Dense { in_features: ins.len(), out_features });
                params.push(Some(LayerParams {
                    weight: Tensor::new(vec![out_features, ins.len()], weight)?,
                    bias: Tensor::new(vec![out_features], bias)?,
                }));
            }
            LayerKind::Relu | LayerKind::MaxPool2x2 => {
                layers.push(*kind);
                params.push(None);
            }
        }
    }

    let new_arch = ArchSpec { input: arch.input, layers, num_classes: arch.num_classes };
    let convs: Vec<String> = path.layers.iter().map(|l| format!("{}", l.conv)).collect();
    let provenance = format!(
        "distilled from sha256:{} class={} ratio={} score={:?} layers={}",
        path.model_digest,
        path.target_class,
        path.reserved_ratio,
        path.score,
        convs.join(",")
    );
    Ok(DistilledModel {
        model: Model::new(new_arch, params, provenance)?,
        target_class: path.target_class,
        reserved_ratio: path.reserved_ratio,
        source_digest: path.model_digest.clone(),
    })
}

/// Forward through the original model with the dropped filters' activation
/// maps forced to zero and the logit biases treated as zero.
pub fn masked_forward<T: Scalar>(model: &Model<T>, batch: &Tensor<T>, path: &CriticalPath) -> Result<Logits<T>> {
    let plan = keep_plan(model, path)?;
    let arch = model.arch();
    let mut masks: Vec<(usize, Vec<bool>)> = Vec::new();
    for (pos, keep) in plan.iter().enumerate() {
        if let (Some(keep), LayerKind::Conv3x3 { out_channels, .. }) = (keep, arch.layers[pos]) {
            let conv = arch.conv_positions().iter().position(|&p| p == pos).expect("conv layer") + 1;
            let mut mask = vec![false; out_channels];
            keep.iter().for_each(|&f| mask[f] = true);
            masks.push((arch.activation_position(conv)?, mask));
        }
    }
    let zeroed = model.with_zero_logit_bias();
    let out = zeroed.forward_range(batch, arch.layers.len(), |i, x| {
        for (pos, mask) in &masks {
            if *pos == i {
                let (c, hw) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
                for sample in x.data_mut().chunks_exact_mut(c * hw) {
                    for (plane, &keep) in sample.chunks_exact_mut(hw).zip(mask) {
                        if !keep {
                            plane.iter_mut().for_each(|v| *v = T::zero());
                        }
                    }
                }
            }
        }
        Ok(())
    })?;
    Ok(Logits(out))
}
