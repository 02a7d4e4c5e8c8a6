//! Architectures, parameter stores and whole-network passes.
//!
//! Conv layers are addressed by their 1-based position among conv layers
//! (`conv = 1` is the first convolution in network order).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{backward_impl, describe, layer_forward, LayerCache, LayerKind, LayerParams, ParamGrads};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub const MNIST: InputShape = InputShape { channels: 1, height: 28, width: 28 };
    pub const CIFAR10: InputShape = InputShape { channels: 3, height: 32, width: 32 };

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered layer list plus the number of classes scored by the final Dense layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: InputShape,
    pub layers: Vec<LayerKind>,
    pub num_classes: usize,
}

impl ArchSpec {
    /// Compact VGG-style network for desk-scale runs: eight 3×3 conv layers
    /// (32, 32 | 64, 64 | 128 ×4), three pools, Dense(256), Dense(classes).
    pub fn vgg_desk(input: InputShape, num_classes: usize) -> Self {
        Self::vgg_style(input, &[&[32, 32], &[64, 64], &[128, 128, 128, 128]], &[256], num_classes)
    }

    /// VGG16 conv stack (13 layers, 64..512) with a 512-unit hidden Dense layer,
    /// the usual CIFAR-10 variant.
    pub fn vgg16(input: InputShape, num_classes: usize) -> Self {
        Self::vgg_style(
            input,
            &[&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]],
            &[512],
            num_classes,
        )
    }

    /// Conv blocks, each followed by a 2×2 pool, then hidden Dense layers and the logit layer.
    /// Every conv and hidden Dense layer is followed by ReLU.
    pub fn vgg_style(input: InputShape, blocks: &[&[usize]], hidden: &[usize], num_classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut channels = input.channels;
        let (mut h, mut w) = (input.height, input.width);
        for block in blocks {
            for &out in block.iter() {
                layers.push(LayerKind::Conv3x3 { in_channels: channels, out_channels: out });
                layers.push(LayerKind::Relu);
                channels = out;
            }
            layers.push(LayerKind::MaxPool2x2);
            h /= 2;
            w /= 2;
        }
        layers.push(LayerKind::Flatten);
        let mut features = channels * h * w;
        for &units in hidden {
            layers.push(LayerKind::Dense { in_features: features, out_features: units });
            layers.push(LayerKind::Relu);
            features = units;
        }
        layers.push(LayerKind::Dense { in_features: features, out_features: num_classes });
        Self { input, layers, num_classes }
    }

    /// Per-layer output shapes (no batch axis). Fails on the first incompatible pair.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.num_classes == 0 {
            return Err(Error::InvalidArch { index: 0, message: "num_classes must be positive".into() });
        }
        if self.input.is_empty() {
            return Err(Error::InvalidArch { index: 0, message: "input extents must be positive".into() });
        }
        let mut shape = self.input.dims().to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, kind) in self.layers.iter().enumerate() {
            if let LayerKind::Conv3x3 { in_channels, out_channels } = kind {
                if *in_channels == 0 || *out_channels == 0 {
                    return Err(Error::InvalidArch { index: i, message: format!("{kind} has a zero extent") });
                }
            }
            if let LayerKind::Dense { in_features, out_features } = kind {
                if *in_features == 0 || *out_features == 0 {
                    return Err(Error::InvalidArch { index: i, message: format!("{kind} has a zero extent") });
                }
            }
            shape = kind.output_shape(&shape).map_err(|_| {
                let prev = match i {
                    0 => String::from("the input"),
                    _ => describe(i - 1, &self.layers[i - 1]),
                };
                Error::InvalidArch {
                    index: i,
                    message: format!("{} cannot follow {prev} producing {shape:?}", describe(i, kind)),
                }
            })?;
            shapes.push(shape.clone());
        }
        match self.layers.last() {
            Some(LayerKind::Dense { out_features, .. }) if *out_features == self.num_classes => Ok(shapes),
            Some(last) => Err(Error::InvalidArch {
                index: self.layers.len() - 1,
                message: format!("final layer {last} must be Dense with {} outputs", self.num_classes),
            }),
            None => Err(Error::InvalidArch { index: 0, message: "no layers".into() }),
        }
    }

    /// Layer positions of the conv layers, in network order.
    pub fn conv_positions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, k)| matches!(k, LayerKind::Conv3x3 { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_conv(&self) -> usize {
        self.conv_positions().len()
    }

    /// Layer position of the 1-based conv layer `conv`.
    pub fn conv_position(&self, conv: usize) -> Result<usize> {
        let positions = self.conv_positions();
        if conv == 0 || conv > positions.len() {
            return Err(Error::InvalidArgument(format!(
                "conv layer {conv} out of range 1..={}",
                positions.len()
            )));
        }
        Ok(positions[conv - 1])
    }

    /// Position of the layer whose output is the conv layer's post-nonlinearity
    /// activation: the directly following ReLU if any, else the conv itself.
    pub fn activation_position(&self, conv: usize) -> Result<usize> {
        let p = self.conv_position(conv)?;
        Ok(match self.layers.get(p + 1) {
            Some(LayerKind::Relu) => p + 1,
            _ => p,
        })
    }

    pub fn conv_filters(&self, conv: usize) -> Result<usize> {
        match self.layers[self.conv_position(conv)?] {
            LayerKind::Conv3x3 { out_channels, .. } => Ok(out_channels),
            _ => unreachable!("conv_position returns conv layers"),
        }
    }
}

/// Per-sample raw logits `[N, num_classes]` (no softmax).
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<T = f32>(pub Tensor<T>);

impl<T: Scalar> Logits<T> {
    pub fn num_samples(&self) -> usize {
        self.0.batch_size()
    }

    pub fn num_classes(&self) -> usize {
        self.0.sample_len()
    }

    pub fn sample(&self, i: usize) -> &[T] {
        self.0.sample(i)
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.0
    }

    /// Index of the largest logit for sample `i`; ties go to the lowest class.
    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.sample(i))
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.num_samples()).map(|i| self.argmax(i)).collect()
    }
}

/// First index of the maximum.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Pre- and post-nonlinearity responses of one conv layer.
#[derive(Clone, Debug)]
pub struct ConvActivation<T = f32> {
    pub pre: Tensor<T>,
    pub post: Tensor<T>,
}

/// Conv activations recorded during a forward pass, indexed by `conv - 1`.
#[derive(Clone, Debug)]
pub struct ActivationCache<T = f32> {
    pub convs: Vec<ConvActivation<T>>,
}

impl<T> ActivationCache<T> {
    pub fn conv(&self, conv: usize) -> Option<&ConvActivation<T>> {
        conv.checked_sub(1).and_then(|i| self.convs.get(i))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParamCount {
    pub layer: usize,
    pub kind: LayerKind,
    pub weights: usize,
    pub biases: usize,
}

impl LayerParamCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases
    }
}

/// Parameter counts, split into conv and dense contributions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamStats {
    pub layers: Vec<LayerParamCount>,
    pub conv_params: usize,
    pub dense_params: usize,
    pub total_params: usize,
}

impl ParamStats {
    pub const BYTES_PER_VALUE: usize = 4;

    pub fn total_bytes(&self) -> usize {
        self.total_params * Self::BYTES_PER_VALUE
    }

    pub fn conv_bytes(&self) -> usize {
        self.conv_params * Self::BYTES_PER_VALUE
    }

    pub fn dense_bytes(&self) -> usize {
        self.dense_params * Self::BYTES_PER_VALUE
    }
}

/// Parameter counts implied by an architecture alone.
pub fn arch_param_stats(arch: &ArchSpec) -> ParamStats {
    let mut layers = Vec::new();
    let (mut conv_params, mut dense_params) = (0, 0);
    for (i, kind) in arch.layers.iter().enumerate() {
        if let Some((ws, bs)) = kind.param_shapes() {
            let entry = LayerParamCount {
                layer: i,
                kind: *kind,
                weights: ws.iter().product(),
                biases: bs.iter().product(),
            };
            match kind {
                LayerKind::Conv3x3 { .. } => conv_params += entry.total(),
                _ => dense_params += entry.total(),
            }
            layers.push(entry);
        }
    }
    ParamStats { layers, conv_params, dense_params, total_params: conv_params + dense_params }
}

/// Architecture, parameters and a free-text provenance note.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    arch: ArchSpec,
    params: Vec<Option<LayerParams<T>>>,
    provenance: String,
}

/// He-initialized model: weights ~ N(0, 2/fan_in), biases zero.
pub fn build_model(arch: ArchSpec, seed: u64) -> Result<Model<f32>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = arch
        .layers
        .iter()
        .map(|kind| {
            kind.param_shapes().map(|(ws, bs)| {
                let std = num_traits::Float::sqrt(2.0 / kind.fan_in() as f64) as f32;
                let weight = Tensor::from_fn(&ws, |_| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    z * std
                });
                LayerParams { weight, bias: Tensor::zeros(&bs) }
            })
        })
        .collect();
    Ok(Model { arch, params, provenance: format!("he-init seed={seed}") })
}

impl<T: Scalar> Model<T> {
    /// Assemble a model from explicit parameters, checking shapes and finiteness.
    pub fn new(arch: ArchSpec, params: Vec<Option<LayerParams<T>>>, provenance: impl Into<String>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter slots for {} layers",
                params.len(),
                arch.layers.len()
            )));
        }
        for (i, (kind, p)) in arch.layers.iter().zip(&params).enumerate() {
            match (kind.param_shapes(), p) {
                (None, None) => {}
                (None, Some(_)) => {
                    return Err(Error::InvalidArgument(format!("{} takes no parameters", describe(i, kind))))
                }
                (Some(_), None) => {
                    return Err(Error::InvalidArgument(format!("{} is missing parameters", describe(i, kind))))
                }
                (Some((ws, bs)), Some(p)) => {
                    if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                        return Err(Error::ShapeMismatch {
                            context: describe(i, kind),
                            expected: ws,
                            actual: p.weight.shape().to_vec(),
                        });
                    }
                    if !p.weight.is_finite() || !p.bias.is_finite() {
                        return Err(Error::NonFinite { context: describe(i, kind) });
                    }
                }
            }
        }
        Ok(Self { arch, params, provenance: provenance.into() })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[Option<LayerParams<T>>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Option<LayerParams<T>>] {
        &mut self.params
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn set_provenance(&mut self, provenance: impl Into<String>) {
        self.provenance = provenance.into();
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn into_parts(self) -> (ArchSpec, Vec<Option<LayerParams<T>>>, String) {
        (self.arch, self.params, self.provenance)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self.params.iter().map(|p| p.as_ref().map(LayerParams::cast)).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Copy with the logit layer's biases set to zero.
    pub fn with_zero_logit_bias(&self) -> Self {
        let mut m = self.clone();
        if let Some(Some(p)) = m.params.last_mut() {
            p.bias.data_mut().iter_mut().for_each(|b| *b = T::zero());
        }
        m
    }

    pub fn param_stats(&self) -> ParamStats {
        arch_param_stats(&self.arch)
    }

    pub(crate) fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.arch.input.dims() {
            let mut expected = vec![s.first().copied().unwrap_or(1)];
            expected.extend(self.arch.input.dims());
            return Err(Error::ShapeMismatch { context: "model input".into(), expected, actual: s.to_vec() });
        }
        Ok(())
    }

    /// Run layers `0..end`, calling `hook(position, &mut output)` after each.
    pub(crate) fn forward_range(
        &self,
        batch: &Tensor<T>,
        end: usize,
        mut hook: impl FnMut(usize, &mut Tensor<T>) -> Result<()>,
    ) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for (i, kind) in self.arch.layers.iter().enumerate().take(end) {
            x = kind.apply(self.params[i].as_ref(), &x)?;
            hook(i, &mut x)?;
        }
        Ok(x)
    }

    /// Raw logits for every sample in an NCHW batch.
    pub fn forward_logits(&self, batch: &Tensor<T>) -> Result<Logits<T>> {
        let out = self.forward_range(batch, self.arch.layers.len(), |_, _| Ok(()))?;
        Ok(Logits(out))
    }

    /// Logits plus every conv layer's pre- and post-nonlinearity response.
    pub fn forward_with_activations(&self, batch: &Tensor<T>) -> Result<(Logits<T>, ActivationCache<T>)> {
        let convs = self.arch.conv_positions();
        let acts: Vec<usize> = (1..=convs.len())
            .map(|c| self.arch.activation_position(c))
            .collect::<Result<_>>()?;
        let mut records: Vec<ConvActivation<T>> = Vec::with_capacity(convs.len());
        let mut pending: Option<Tensor<T>> = None;
        let out = self.forward_range(batch, self.arch.layers.len(), |i, x| {
            if convs.contains(&i) {
                pending = Some(x.clone());
            }
            if acts.contains(&i) {
                let pre = pending.take().expect("conv precedes its activation");
                records.push(ConvActivation { pre, post: x.clone() });
            }
            Ok(())
        })?;
        Ok((Logits(out), ActivationCache { convs: records }))
    }

    /// Forward through layers `0..end`, saving every layer cache.
    pub(crate) fn forward_trace(&self, batch: &Tensor<T>, end: usize) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(end);
        for (i, kind) in self.arch.layers.iter().enumerate().take(end) {
            let (y, cache) = layer_forward(*kind, self.params[i].as_ref(), &x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Backpropagate `grad` (w.r.t. the output of layer `caches.len() - 1`)
    /// down to the input of layer `stop`. `visit(p, g)` sees the gradient with
    /// respect to the output of every layer `p ≥ stop` (and `stop - 1` via the
    /// returned input gradient). Parameter gradients are collected when
    /// `want_param_grads` is set.
    pub(crate) fn backward_trace(
        &self,
        caches: &[LayerCache<T>],
        grad: Tensor<T>,
        stop: usize,
        want_param_grads: bool,
        mut visit: impl FnMut(usize, &Tensor<T>),
    ) -> Result<(Tensor<T>, Vec<Option<ParamGrads<T>>>)> {
        let mut g = grad;
        let mut grads: Vec<Option<ParamGrads<T>>> = vec![None; caches.len()];
        for i in (stop..caches.len()).rev() {
            visit(i, &g);
            let kind = self.arch.layers[i];
            let (gi, gp) = backward_impl(kind, self.params[i].as_ref(), &caches[i], &g, want_param_grads)?;
            grads[i] = gp;
            g = gi;
        }
        Ok((g, grads))
    }
}
