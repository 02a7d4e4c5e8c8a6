//! Forward and backward kernels for the five layer kinds.
//!
//! Conv3x3 is lowered to im2col + GEMM. The im2col row order is
//! (channel, kernel row, kernel column), so every output accumulates in a
//! fixed kernel-row-major order and results are reproducible bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Upper bound on im2col buffer elements; larger batches are processed in chunks.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// 3×3 convolution, padding 1, stride 1.
    Conv3x3 { in_channels: usize, out_channels: usize },
    Relu,
    /// 2×2 max pooling, stride 2. Odd trailing rows/columns are dropped.
    MaxPool2x2,
    Flatten,
    Dense { in_features: usize, out_features: usize },
}

impl core::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LayerKind::Conv3x3 { in_channels, out_channels } => {
                write!(f, "Conv3x3({in_channels}->{out_channels})")
            }
            LayerKind::Relu => f.write_str("ReLU"),
            LayerKind::MaxPool2x2 => f.write_str("MaxPool2x2"),
            LayerKind::Flatten => f.write_str("Flatten"),
            LayerKind::Dense { in_features, out_features } => {
                write!(f, "Dense({in_features}->{out_features})")
            }
        }
    }
}

/// Weight and bias of a parameterized layer.
///
/// Conv3x3 weights are `[out, in, 3, 3]`; Dense weights are `[out, in]`.
/// Biases are `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams { weight: self.weight.cast(), bias: self.bias.cast() }
    }

    pub fn zeros_like(&self) -> Self {
        LayerParams {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients with the same layout as [`LayerParams`].
pub type ParamGrads<T> = LayerParams<T>;

/// State saved by [`layer_forward`] for the matching [`layer_backward`].
#[derive(Clone, Debug)]
pub struct LayerCache<T = f32> {
    kind: LayerKind,
    input: Tensor<T>,
    output_shape: Vec<usize>,
    /// Flat input index of each pooled maximum.
    argmax: Vec<usize>,
}

impl<T> LayerCache<T> {
    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv3x3 { .. } | LayerKind::Dense { .. })
    }

    /// `(weight shape, bias shape)` for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv3x3 { in_channels, out_channels } => {
                Some((vec![out_channels, in_channels, 3, 3], vec![out_channels]))
            }
            LayerKind::Dense { in_features, out_features } => {
                Some((vec![out_features, in_features], vec![out_features]))
            }
            _ => None,
        }
    }

    /// Number of inputs feeding each output unit.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv3x3 { in_channels, .. } => in_channels * 9,
            LayerKind::Dense { in_features, .. } => in_features,
            _ => 0,
        }
    }

    /// Output shape for a single sample (no batch axis), or an error if the
    /// sample shape is not accepted.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            context: format!("{self} input"),
            expected,
            actual: input.to_vec(),
        };
        match *self {
            LayerKind::Conv3x3 { in_channels, out_channels } => match input {
                [c, h, w] if *c == in_channels => Ok(vec![out_channels, *h, *w]),
                [_, h, w] => Err(mismatch(vec![in_channels, *h, *w])),
                _ => Err(mismatch(vec![in_channels, 0, 0])),
            },
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2x2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(mismatch(vec![0, 2, 2])),
            },
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Dense { in_features, out_features } => match input {
                [f] if *f == in_features => Ok(vec![out_features]),
                _ => Err(mismatch(vec![in_features])),
            },
        }
    }

    fn check_params<T: Scalar>(&self, params: Option<&LayerParams<T>>) -> Result<()> {
        match (self.param_shapes(), params) {
            (None, _) => Ok(()),
            (Some(_), None) => Err(Error::InvalidArgument(format!("{self} requires parameters"))),
            (Some((ws, bs)), Some(p)) => {
                if p.weight.shape() != ws.as_slice() {
                    return Err(Error::ShapeMismatch {
                        context: format!("{self} weight"),
                        expected: ws,
                        actual: p.weight.shape().to_vec(),
                    });
                }
                if p.bias.shape() != bs.as_slice() {
                    return Err(Error::ShapeMismatch {
                        context: format!("{self} bias"),
                        expected: bs,
                        actual: p.bias.shape().to_vec(),
                    });
                }
                Ok(())
            }
        }
    }

    fn batched_output_shape<T: Scalar>(&self, input: &Tensor<T>) -> Result<Vec<usize>> {
        let shape = input.shape();
        let out = self.output_shape(&shape[1..]).map_err(|e| match e {
            Error::ShapeMismatch { context, mut expected, .. } => {
                expected.insert(0, shape[0]);
                Error::ShapeMismatch { context, expected, actual: shape.to_vec() }
            }
            other => other,
        })?;
        let mut full = Vec::with_capacity(out.len() + 1);
        full.push(shape[0]);
        full.extend(out);
        Ok(full)
    }

    /// Forward pass without saving a cache.
    pub fn apply<T: Scalar>(&self, params: Option<&LayerParams<T>>, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_params(params)?;
        let out_shape = self.batched_output_shape(input)?;
        let out = match *self {
            LayerKind::Conv3x3 { in_channels, out_channels } => {
                let p = params.expect("checked");
                conv_forward(input, &p.weight, &p.bias, in_channels, out_channels, out_shape)
            }
            LayerKind::Relu => relu_forward(input),
            LayerKind::MaxPool2x2 => maxpool_forward(input, out_shape).0,
            LayerKind::Flatten => Tensor::from_parts(out_shape, input.data().to_vec()),
            LayerKind::Dense { in_features, out_features } => {
                let p = params.expect("checked");
                dense_forward(input, &p.weight, &p.bias, in_features, out_features)
            }
        };
        out.ensure_finite(|| format!("{self} output"))?;
        Ok(out)
    }
}

/// Run one layer, returning its output and the cache needed to differentiate it.
pub fn layer_forward<T: Scalar>(
    kind: LayerKind,
    params: Option<&LayerParams<T>>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    kind.check_params(params)?;
    let out_shape = kind.batched_output_shape(input)?;
    let mut argmax = Vec::new();
    let out = match kind {
        LayerKind::MaxPool2x2 => {
            let (out, idx) = maxpool_forward(input, out_shape.clone());
            argmax = idx;
            out
        }
        _ => kind.apply(params, input)?,
    };
    out.ensure_finite(|| format!("{kind} output"))?;
    let cache = LayerCache { kind, input: input.clone(), output_shape: out.shape().to_vec(), argmax };
    Ok((out, cache))
}

/// Backpropagate `grad_output` through one layer.
pub fn layer_backward<T: Scalar>(
    kind: LayerKind,
    params: Option<&LayerParams<T>>,
    cache: &LayerCache<T>,
    grad_output: &Tensor<T>,
) -> Result<(Tensor<T>, Option<ParamGrads<T>>)> {
    backward_impl(kind, params, cache, grad_output, true)
}

/// As [`layer_backward`], optionally skipping parameter gradients.
pub(crate) fn backward_impl<T: Scalar>(
    kind: LayerKind,
    params: Option<&LayerParams<T>>,
    cache: &LayerCache<T>,
    grad_output: &Tensor<T>,
    want_param_grads: bool,
) -> Result<(Tensor<T>, Option<ParamGrads<T>>)> {
    if cache.kind != kind {
        return Err(Error::StaleCache {
            layer: format!("{kind}"),
            message: format!("cache was produced by {}", cache.kind),
        });
    }
    kind.check_params(params)?;
    if grad_output.shape() != cache.output_shape.as_slice() {
        return Err(Error::StaleCache {
            layer: format!("{kind}"),
            message: format!(
                "gradient shape {:?} does not match forward output {:?}",
                grad_output.shape(),
                cache.output_shape
            ),
        });
    }
    let input = &cache.input;
    let (grad_input, grads) = match kind {
        LayerKind::Conv3x3 { in_channels, out_channels } => {
            let p = params.expect("checked");
            conv_backward(input, &p.weight, grad_output, in_channels, out_channels, want_param_grads)
        }
        LayerKind::Relu => {
            let data = input
                .data()
                .iter()
                .zip(grad_output.data())
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect();
            (Tensor::from_parts(input.shape().to_vec(), data), None)
        }
        LayerKind::MaxPool2x2 => {
            let mut data = vec![T::zero(); input.len()];
            for (&src, &g) in cache.argmax.iter().zip(grad_output.data()) {
                data[src] = data[src] + g;
            }
            (Tensor::from_parts(input.shape().to_vec(), data), None)
        }
        LayerKind::Flatten => (Tensor::from_parts(input.shape().to_vec(), grad_output.data().to_vec()), None),
        LayerKind::Dense { in_features, out_features } => {
            let p = params.expect("checked");
            dense_backward(input, &p.weight, grad_output, in_features, out_features, want_param_grads)
        }
    };
    grad_input.ensure_finite(|| format!("{kind} input gradient"))?;
    Ok((grad_input, grads))
}

fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Ties resolve to the first maximum in row-major window order.
fn maxpool_forward<T: Scalar>(input: &Tensor<T>, out_shape: Vec<usize>) -> (Tensor<T>, Vec<usize>) {
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (Tensor::from_parts(out_shape, out), idx)
}

fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    in_features: usize,
    out_features: usize,
) -> Tensor<T> {
    let n = input.batch_size();
    let mut out = vec![T::zero(); n * out_features];
    gemm(
        MatRef::new(input.data(), n, in_features),
        MatRef::t(weight.data(), in_features, out_features),
        &mut out,
        false,
    );
    for row in out.chunks_exact_mut(out_features) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Tensor::from_parts(vec![n, out_features], out)
}

fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
    in_features: usize,
    out_features: usize,
    want_param_grads: bool,
) -> (Tensor<T>, Option<ParamGrads<T>>) {
    let n = input.batch_size();
    let g = grad_output.data();
    let mut gx = vec![T::zero(); n * in_features];
    gemm(
        MatRef::new(g, n, out_features),
        MatRef::new(weight.data(), out_features, in_features),
        &mut gx,
        false,
    );
    let grads = want_param_grads.then(|| {
        let mut gw = vec![T::zero(); out_features * in_features];
        gemm(
            MatRef::t(g, out_features, n),
            MatRef::new(input.data(), n, in_features),
            &mut gw,
            false,
        );
        let mut gb = vec![T::zero(); out_features];
        for row in g.chunks_exact(out_features) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        LayerParams {
            weight: Tensor::from_parts(vec![out_features, in_features], gw),
            bias: Tensor::from_parts(vec![out_features], gb),
        }
    });
    (Tensor::from_parts(input.shape().to_vec(), gx), grads)
}

/// Samples per im2col chunk for a given geometry.
fn chunk_len(batch: usize, rows: usize, hw: usize) -> usize {
    (COLS_BUDGET / (rows * hw).max(1)).clamp(1, batch)
}

/// `cols[(c·9 + ky·3 + kx), s·hw + y·w + x] = input[s, c, y+ky−1, x+kx−1]`, zero outside.
fn im2col<T: Scalar>(x: &[T], samples: usize, c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    let width = samples * hw;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * width;
                for s in 0..samples {
                    let plane = &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    let dst = &mut cols[row + s * hw..row + (s + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        let line = &mut dst[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        for (xx, v) in line.iter_mut().enumerate() {
                            let sx = xx as isize + kx as isize - 1;
                            *v = if sx < 0 || sx >= w as isize { T::zero() } else { src[sx as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image batch.
fn col2im<T: Scalar>(cols: &[T], samples: usize, c: usize, h: usize, w: usize, x: &mut [T]) {
    let hw = h * w;
    let width = samples * hw;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * width;
                for s in 0..samples {
                    let src = &cols[row + s * hw..row + (s + 1) * hw];
                    let plane = &mut x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let line = &src[y * w..(y + 1) * w];
                        let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        for (xx, &v) in line.iter().enumerate() {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                dst[sx as usize] = dst[sx as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    cin: usize,
    cout: usize,
    out_shape: Vec<usize>,
) -> Tensor<T> {
    let s = input.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let hw = h * w;
    let rows = cin * 9;
    let chunk = chunk_len(n, rows, hw);
    let mut out = vec![T::zero(); n * cout * hw];
    let mut cols = vec![T::zero(); rows * chunk * hw];
    let mut tmp = vec![T::zero(); cout * chunk * hw];
    let x = input.data();
    let mut start = 0;
    while start < n {
        let m = chunk.min(n - start);
        let width = m * hw;
        im2col(&x[start * cin * hw..(start + m) * cin * hw], m, cin, h, w, &mut cols[..rows * width]);
        gemm(
            MatRef::new(weight.data(), cout, rows),
            MatRef::new(&cols[..rows * width], rows, width),
            &mut tmp[..cout * width],
            false,
        );
        for sidx in 0..m {
            for o in 0..cout {
                let b = bias.data()[o];
                let src = &tmp[o * width + sidx * hw..o * width + (sidx + 1) * hw];
                let dst = &mut out[((start + sidx) * cout + o) * hw..((start + sidx) * cout + o + 1) * hw];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        }
        start += m;
    }
    Tensor::from_parts(out_shape, out)
}

fn conv_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
    cin: usize,
    cout: usize,
    want_param_grads: bool,
) -> (Tensor<T>, Option<ParamGrads<T>>) {
    let s = input.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let hw = h * w;
    let rows = cin * 9;
    let chunk = chunk_len(n, rows, hw);
    let x = input.data();
    let g = grad_output.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); cout * rows];
    let mut gb = vec![T::zero(); cout];
    let mut cols = vec![T::zero(); rows * chunk * hw];
    let mut gmat = vec![T::zero(); cout * chunk * hw];
    let mut start = 0;
    while start < n {
        let m = chunk.min(n - start);
        let width = m * hw;
        // gather grad_output chunk into [cout, m·hw]
        for sidx in 0..m {
            for o in 0..cout {
                let src = &g[((start + sidx) * cout + o) * hw..((start + sidx) * cout + o + 1) * hw];
                gmat[o * width + sidx * hw..o * width + (sidx + 1) * hw].copy_from_slice(src);
            }
        }
        let gmat = &gmat[..cout * width];
        if want_param_grads {
            im2col(&x[start * cin * hw..(start + m) * cin * hw], m, cin, h, w, &mut cols[..rows * width]);
            gemm(
                MatRef::new(gmat, cout, width),
                MatRef::t(&cols[..rows * width], width, rows),
                &mut gw,
                start > 0,
            );
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc = *acc + gmat[o * width..(o + 1) * width].iter().copied().sum::<T>();
            }
        }
        gemm(
            MatRef::t(weight.data(), rows, cout),
            MatRef::new(gmat, cout, width),
            &mut cols[..rows * width],
            false,
        );
        col2im(&cols[..rows * width], m, cin, h, w, &mut gx[start * cin * hw..(start + m) * cin * hw]);
        start += m;
    }
    let grads = want_param_grads.then(|| LayerParams {
        weight: Tensor::from_parts(vec![cout, cin, 3, 3], gw),
        bias: Tensor::from_parts(vec![cout], gb),
    });
    (Tensor::from_parts(input.shape().to_vec(), gx), grads)
}

/// Name used in error messages, e.g. `"layer 3 (Conv3x3(32->64))"`.
pub(crate) fn describe(index: usize, kind: &LayerKind) -> String {
    format!("layer {index} ({kind})")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(cin: usize, cout: usize) -> LayerKind {
        LayerKind::Conv3x3 { in_channels: cin, out_channels: cout }
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut w = vec![0.0f32; 9];
        w[4] = 1.0;
        let p = LayerParams {
            weight: Tensor::new(vec![1, 1, 3, 3], w).unwrap(),
            bias: Tensor::zeros(&[1]),
        };
        let x = Tensor::from_fn(&[1, 1, 5, 5], |i| (i as f32) * 0.37 - 3.0);
        let (y, _) = layer_forward(conv(1, 1), Some(&p), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_forward_and_backward() {
        let x = Tensor::new(vec![1, 3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        let (y, _) = layer_forward(LayerKind::Relu, None, &x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

        let x = Tensor::new(vec![1, 2], vec![-1.0f32, 2.0]).unwrap();
        let (_, cache) = layer_forward(LayerKind::Relu, None, &x).unwrap();
        let g = Tensor::new(vec![1, 2], vec![3.0f32, 3.0]).unwrap();
        let (gi, gp) = layer_backward(LayerKind::Relu, None, &cache, &g).unwrap();
        assert_eq!(gi.data(), &[0.0, 3.0]);
        assert!(gp.is_none());
    }

    #[test]
    fn maxpool_ties_break_to_first_and_conserve_mass() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0f32, 1.0, 0.0, 5.0, 1.0, 1.0, 5.0, 2.0]).unwrap();
        let (y, cache) = layer_forward(LayerKind::MaxPool2x2, None, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[1.0, 5.0]);
        let g = Tensor::new(vec![1, 1, 1, 2], vec![0.25f32, -2.0]).unwrap();
        let (gi, _) = layer_backward(LayerKind::MaxPool2x2, None, &cache, &g).unwrap();
        assert_eq!(gi.data(), &[0.25, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(gi.sum(), g.sum());
    }

    #[test]
    fn maxpool_drops_odd_edges() {
        let x = Tensor::<f32>::zeros(&[2, 3, 7, 5]);
        let (y, _) = layer_forward(LayerKind::MaxPool2x2, None, &x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 2]);
    }

    #[test]
    fn flatten_shape() {
        let x = Tensor::<f32>::zeros(&[2, 3, 4, 5]);
        let (y, _) = layer_forward(LayerKind::Flatten, None, &x).unwrap();
        assert_eq!(y.shape(), &[2, 60]);
    }

    #[test]
    fn shape_errors_name_layer_and_shapes() {
        let p = LayerParams { weight: Tensor::<f32>::zeros(&[4, 2, 3, 3]), bias: Tensor::zeros(&[4]) };
        let x = Tensor::<f32>::zeros(&[1, 3, 5, 5]);
        let err = layer_forward(conv(2, 4), Some(&p), &x).unwrap_err();
        let msg = alloc::string::ToString::to_string(&err);
        assert!(msg.contains("Conv3x3(2->4)"), "{msg}");
        assert!(msg.contains("[1, 2, 5, 5]") && msg.contains("[1, 3, 5, 5]"), "{msg}");
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let x = Tensor::<f32>::zeros(&[1, 4]);
        let (_, cache) = layer_forward(LayerKind::Relu, None, &x).unwrap();
        let g = Tensor::<f32>::zeros(&[1, 4]);
        assert!(matches!(
            layer_backward(LayerKind::Flatten, None, &cache, &g),
            Err(Error::StaleCache { .. })
        ));
        let g = Tensor::<f32>::zeros(&[1, 5]);
        assert!(matches!(
            layer_backward(LayerKind::Relu, None, &cache, &g),
            Err(Error::StaleCache { .. })
        ));
    }

    #[test]
    fn chunked_conv_matches_single_chunk() {
        // enough samples to force several im2col chunks
        let cin = 2;
        let k = conv(cin, 3);
        let p = LayerParams {
            weight: Tensor::from_fn(&[3, cin, 3, 3], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5),
            bias: Tensor::from_fn(&[3], |i| i as f64 * 0.1),
        };
        let n = COLS_BUDGET / (cin * 9 * 64) + 3;
        let x = Tensor::from_fn(&[n, cin, 8, 8], |i| ((i * 31) % 17) as f64 / 17.0 - 0.5);
        let (y, cache) = layer_forward(k, Some(&p), &x).unwrap();
        let last = x.gather(&[n - 1]);
        let (y1, _) = layer_forward(k, Some(&p), &last).unwrap();
        assert_eq!(y.sample(n - 1), y1.data());
        let (gx, _) = layer_backward(k, Some(&p), &cache, &y).unwrap();
        let (_, c1) = layer_forward(k, Some(&p), &last).unwrap();
        let (gx1, _) = layer_backward(k, Some(&p), &c1, &y1).unwrap();
        assert_eq!(gx.sample(n - 1), gx1.data());
    }
}
