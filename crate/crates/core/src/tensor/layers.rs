use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{matmul, MatRef, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
}

/// Layer kinds understood by the kernel. Convolutions use stride (1,1) and
/// SAME padding; pooling is 2x2 max-pooling with stride 2 and SAME padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        kernel_size: usize,
        out_channels: usize,
        activation: Activation,
    },
    MaxPool2d,
    Dropout {
        rate: f64,
    },
    Dense {
        units: usize,
        activation: Activation,
    },
    /// Channel-axis merge. Inputs with larger spatial extent are max-pooled
    /// down and then cropped to the smallest input.
    Concat,
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
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

pub(crate) const fn pool_out(extent: usize) -> usize {
    extent.div_ceil(2)
}

/// Number of 2x2 pools applied to `(h, w)` before cropping to `(th, tw)`.
pub(crate) fn alignment_pools(mut h: usize, mut w: usize, th: usize, tw: usize) -> usize {
    let mut pools = 0;
    while (h > th || w > tw) && pool_out(h) >= th && pool_out(w) >= tw {
        h = pool_out(h);
        w = pool_out(w);
        pools += 1;
    }
    pools
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d => "maxpool2d",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Concat => "concat",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Short human-readable description with hyperparameters.
    pub fn describe(&self) -> String {
        match self {
            LayerSpec::Conv2d {
                kernel_size,
                out_channels,
                ..
            } => format!("conv2d k={kernel_size} f={out_channels}"),
            LayerSpec::MaxPool2d => "maxpool2d 2x2/2".to_string(),
            LayerSpec::Dropout { rate } => format!("dropout p={rate:.3}"),
            LayerSpec::Dense { units, .. } => format!("dense u={units}"),
            LayerSpec::Concat => "concat".to_string(),
            LayerSpec::Flatten => "flatten".to_string(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    fn shape_error(&self, expected: &str, found: &[usize]) -> TensorError {
        TensorError::ShapeMismatch {
            layer: self.describe(),
            expected: expected.to_string(),
            found: found.to_vec(),
        }
    }

    fn single<'a>(&self, inputs: &[&'a [usize]]) -> Result<&'a [usize], TensorError> {
        match inputs {
            [one] => Ok(one),
            _ => Err(TensorError::InvalidLayer {
                layer: self.describe(),
                reason: format!("expects exactly one input, got {}", inputs.len()),
            }),
        }
    }

    /// Output shape for per-sample input shapes (no batch dimension).
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, TensorError> {
        match self {
            LayerSpec::Conv2d { out_channels, .. } => {
                let s = self.single(inputs)?;
                if s.len() != 3 {
                    return Err(self.shape_error("H x W x C", s));
                }
                Ok(vec![s[0], s[1], *out_channels])
            }
            LayerSpec::MaxPool2d => {
                let s = self.single(inputs)?;
                if s.len() != 3 {
                    return Err(self.shape_error("H x W x C", s));
                }
                Ok(vec![pool_out(s[0]), pool_out(s[1]), s[2]])
            }
            LayerSpec::Dropout { .. } => Ok(self.single(inputs)?.to_vec()),
            LayerSpec::Dense { units, .. } => {
                let s = self.single(inputs)?;
                if s.len() != 1 {
                    return Err(self.shape_error("flat feature vector", s));
                }
                Ok(vec![*units])
            }
            LayerSpec::Flatten => Ok(vec![self.single(inputs)?.iter().product()]),
            LayerSpec::Concat => {
                if inputs.is_empty() {
                    return Err(TensorError::InvalidLayer {
                        layer: self.describe(),
                        reason: "needs at least one input".into(),
                    });
                }
                for s in inputs {
                    if s.len() != 3 {
                        return Err(self.shape_error("spatial H x W x C inputs", s));
                    }
                }
                let th = inputs.iter().map(|s| s[0]).min().unwrap_or(0);
                let tw = inputs.iter().map(|s| s[1]).min().unwrap_or(0);
                let c = inputs.iter().map(|s| s[2]).sum();
                Ok(vec![th, tw, c])
            }
        }
    }

    /// Weight and bias shapes for a trainable layer fed by `input`.
    pub fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        match self {
            LayerSpec::Conv2d {
                kernel_size,
                out_channels,
                ..
            } => Some((
                vec![*kernel_size, *kernel_size, *input.last()?, *out_channels],
                vec![*out_channels],
            )),
            LayerSpec::Dense { units, .. } => Some((vec![input.iter().product(), *units], vec![*units])),
            _ => None,
        }
    }

    /// Glorot fan-in / fan-out, following the usual receptive-field convention for convolutions.
    pub fn fans(&self, input: &[usize]) -> Option<(usize, usize)> {
        match self {
            LayerSpec::Conv2d {
                kernel_size,
                out_channels,
                ..
            } => {
                let field = kernel_size * kernel_size;
                Some((field * input.last()?, field * out_channels))
            }
            LayerSpec::Dense { units, .. } => Some((input.iter().product(), *units)),
            _ => None,
        }
    }
}

/// Activation record produced by [`forward_layer`] and consumed by [`backward_layer`].
#[derive(Clone, Debug)]
pub struct Cache<T = f32> {
    spec: LayerSpec,
    kind: CacheKind<T>,
}

#[derive(Clone, Debug)]
enum CacheKind<T> {
    Infer,
    Conv {
        input: Tensor<T>,
        active: Option<Vec<bool>>,
    },
    Pool(PoolRecord),
    Dropout {
        scale: Option<Vec<T>>,
    },
    Dense {
        input: Tensor<T>,
        active: Option<Vec<bool>>,
    },
    Concat {
        branches: Vec<ConcatBranch>,
        out_shape: Vec<usize>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct PoolRecord {
    input_shape: Vec<usize>,
    argmax: Vec<u32>,
}

#[derive(Clone, Debug)]
struct ConcatBranch {
    pools: Vec<PoolRecord>,
    /// Shape after pooling, before the crop.
    pooled_shape: Vec<usize>,
    channels: usize,
}

fn check_batch_shape<T: Scalar>(spec: &LayerSpec, t: &Tensor<T>, rank: usize) -> Result<(), TensorError> {
    if t.shape().len() != rank || t.shape().contains(&0) {
        return Err(spec.shape_error(if rank == 4 { "N x H x W x C" } else { "N x F" }, t.shape()));
    }
    Ok(())
}

fn require_params<'a, T>(spec: &LayerSpec, params: Option<&'a Params<T>>) -> Result<&'a Params<T>, TensorError> {
    params.ok_or_else(|| TensorError::InvalidLayer {
        layer: spec.describe(),
        reason: "missing parameters".into(),
    })
}

fn check_params<T: Scalar>(spec: &LayerSpec, params: &Params<T>, input: &[usize]) -> Result<(), TensorError> {
    let (w, b) = spec.param_shapes(input).expect("trainable layer");
    if params.weight.shape() != w.as_slice() {
        return Err(spec.shape_error(&format!("weight {w:?}"), params.weight.shape()));
    }
    if params.bias.shape() != b.as_slice() {
        return Err(spec.shape_error(&format!("bias {b:?}"), params.bias.shape()));
    }
    Ok(())
}

fn apply_activation<T: Scalar>(act: Activation, data: &mut [T], mode: Mode) -> Option<Vec<bool>> {
    match act {
        Activation::Linear => None,
        Activation::Relu => {
            let mut mask = if mode == Mode::Train {
                Vec::with_capacity(data.len())
            } else {
                Vec::new()
            };
            for v in data.iter_mut() {
                let on = *v > T::zero();
                if !on {
                    *v = T::zero();
                }
                if mode == Mode::Train {
                    mask.push(on);
                }
            }
            Some(mask)
        }
    }
}

fn masked_grad<T: Scalar>(grad: &Tensor<T>, active: &Option<Vec<bool>>) -> Tensor<T> {
    match active {
        None => grad.clone(),
        Some(mask) => {
            let mut g = grad.clone();
            for (v, &on) in g.data_mut().iter_mut().zip(mask) {
                if !on {
                    *v = T::zero();
                }
            }
            g
        }
    }
}

/// Runs one layer forward over a batch.
pub fn forward_layer<T: Scalar, R: Rng + ?Sized>(
    spec: &LayerSpec,
    params: Option<&Params<T>>,
    inputs: &[&Tensor<T>],
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Cache<T>), TensorError> {
    if !matches!(spec, LayerSpec::Concat) && inputs.len() != 1 {
        return Err(TensorError::InvalidLayer {
            layer: spec.describe(),
            reason: format!("expects exactly one input, got {}", inputs.len()),
        });
    }
    let (out, kind) = match spec {
        LayerSpec::Conv2d {
            kernel_size,
            activation,
            ..
        } => {
            let x = inputs[0];
            check_batch_shape(spec, x, 4)?;
            let params = require_params(spec, params)?;
            check_params(spec, params, &x.shape()[1..])?;
            let mut out = conv_forward(x, params, *kernel_size);
            let active = apply_activation(*activation, out.data_mut(), mode);
            let kind = match mode {
                Mode::Train => CacheKind::Conv {
                    input: x.clone(),
                    active,
                },
                Mode::Infer => CacheKind::Infer,
            };
            (out, kind)
        }
        LayerSpec::MaxPool2d => {
            let x = inputs[0];
            check_batch_shape(spec, x, 4)?;
            let (out, record) = maxpool_forward(x);
            let kind = match mode {
                Mode::Train => CacheKind::Pool(record),
                Mode::Infer => CacheKind::Infer,
            };
            (out, kind)
        }
        LayerSpec::Dropout { rate } => {
            let x = inputs[0];
            if !(0.0..1.0).contains(rate) {
                return Err(TensorError::InvalidLayer {
                    layer: spec.describe(),
                    reason: "rate must lie in [0, 1)".into(),
                });
            }
            match mode {
                Mode::Infer => (x.clone(), CacheKind::Infer),
                Mode::Train => {
                    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
                    let scale: Vec<T> = (0..x.len())
                        .map(|_| if rng.gen::<f64>() < *rate { T::zero() } else { keep })
                        .collect();
                    let mut out = x.clone();
                    for (v, &s) in out.data_mut().iter_mut().zip(&scale) {
                        *v = *v * s;
                    }
                    (out, CacheKind::Dropout { scale: Some(scale) })
                }
            }
        }
        LayerSpec::Dense { activation, .. } => {
            let x = inputs[0];
            check_batch_shape(spec, x, 2)?;
            let params = require_params(spec, params)?;
            check_params(spec, params, &x.shape()[1..])?;
            let mut out = dense_forward(x, params);
            let active = apply_activation(*activation, out.data_mut(), mode);
            let kind = match mode {
                Mode::Train => CacheKind::Dense {
                    input: x.clone(),
                    active,
                },
                Mode::Infer => CacheKind::Infer,
            };
            (out, kind)
        }
        LayerSpec::Flatten => {
            let x = inputs[0];
            if x.shape().len() < 2 {
                return Err(spec.shape_error("batched tensor", x.shape()));
            }
            let n = x.batch();
            let input_shape = x.shape().to_vec();
            let out = x.clone().reshape(vec![n, x.len() / n])?;
            let kind = match mode {
                Mode::Train => CacheKind::Flatten { input_shape },
                Mode::Infer => CacheKind::Infer,
            };
            (out, kind)
        }
        LayerSpec::Concat => {
            let (out, branches) = concat_forward(spec, inputs)?;
            let kind = match mode {
                Mode::Train => CacheKind::Concat {
                    branches,
                    out_shape: out.shape().to_vec(),
                },
                Mode::Infer => CacheKind::Infer,
            };
            (out, kind)
        }
    };
    Ok((
        out,
        Cache {
            spec: spec.clone(),
            kind,
        },
    ))
}

/// Input gradients plus, for trainable layers, parameter gradients.
pub type LayerGrads<T> = (Vec<Tensor<T>>, Option<Params<T>>);

/// Gradients of one layer given the gradient of its output.
///
/// Returns one gradient per forward input and, for trainable layers, the
/// parameter gradients.
pub fn backward_layer<T: Scalar>(
    spec: &LayerSpec,
    params: Option<&Params<T>>,
    cache: &Cache<T>,
    grad_output: &Tensor<T>,
) -> Result<LayerGrads<T>, TensorError> {
    let mismatch = || TensorError::CacheMismatch { layer: spec.describe() };
    if &cache.spec != spec {
        return Err(mismatch());
    }
    match (&cache.kind, spec) {
        (CacheKind::Conv { input, active }, LayerSpec::Conv2d { kernel_size, .. }) => {
            let params = require_params(spec, params)?;
            let expected = [input.shape()[0], input.shape()[1], input.shape()[2], params.bias.len()];
            if grad_output.shape() != expected {
                return Err(spec.shape_error(&format!("{expected:?}"), grad_output.shape()));
            }
            let g = masked_grad(grad_output, active);
            let (dx, dp) = conv_backward(input, params, *kernel_size, &g);
            Ok((vec![dx], Some(dp)))
        }
        (CacheKind::Pool(record), LayerSpec::MaxPool2d) => {
            if grad_output.len() != record.argmax.len() {
                return Err(spec.shape_error("pooled output shape", grad_output.shape()));
            }
            Ok((vec![maxpool_backward(record, grad_output)], None))
        }
        (CacheKind::Dropout { scale }, LayerSpec::Dropout { .. }) => {
            let mut g = grad_output.clone();
            if let Some(scale) = scale {
                if scale.len() != g.len() {
                    return Err(mismatch());
                }
                for (v, &s) in g.data_mut().iter_mut().zip(scale) {
                    *v = *v * s;
                }
            }
            Ok((vec![g], None))
        }
        (CacheKind::Dense { input, active }, LayerSpec::Dense { units, .. }) => {
            let params = require_params(spec, params)?;
            if grad_output.shape() != [input.batch(), *units] {
                return Err(spec.shape_error(&format!("[{}, {units}]", input.batch()), grad_output.shape()));
            }
            let g = masked_grad(grad_output, active);
            let (dx, dp) = dense_backward(input, params, &g);
            Ok((vec![dx], Some(dp)))
        }
        (CacheKind::Flatten { input_shape }, LayerSpec::Flatten) => {
            Ok((vec![grad_output.clone().reshape(input_shape.clone())?], None))
        }
        (CacheKind::Concat { branches, out_shape }, LayerSpec::Concat) => {
            if grad_output.shape() != out_shape.as_slice() {
                return Err(spec.shape_error(&format!("{out_shape:?}"), grad_output.shape()));
            }
            Ok((concat_backward(branches, grad_output), None))
        }
        _ => Err(mismatch()),
    }
}

fn same_padding(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Fills `cols` (`(h*w) x (k*k*c)`) with the receptive fields of one sample,
/// reading `pad` rows and columns of zeros above and left of the input.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, k: usize, pad: usize, cols: &mut [T]) {
    let pad = pad as isize;
    let row_len = k * k * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * row_len..(y * w + xx + 1) * row_len];
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    let dst = &mut row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (sy as usize * w + sx as usize) * c;
                        dst.copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, params: &Params<T>, k: usize) -> Tensor<T> {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = params.bias.len();
    let kk = k * k * c;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, h, w, cout]);
    let mut cols = vec![T::zero(); hw * kk];
    let bias = params.bias.data();
    for s in 0..n {
        im2col(
            &x.data()[s * hw * c..(s + 1) * hw * c],
            h,
            w,
            c,
            k,
            same_padding(k),
            &mut cols,
        );
        let o = &mut out.data_mut()[s * hw * cout..(s + 1) * hw * cout];
        for row in o.chunks_exact_mut(cout) {
            row.copy_from_slice(bias);
        }
        matmul(
            MatRef::new(&cols, hw, kk),
            MatRef::new(params.weight.data(), kk, cout),
            o,
            true,
        );
    }
    out
}

fn conv_backward<T: Scalar>(x: &Tensor<T>, params: &Params<T>, k: usize, g: &Tensor<T>) -> (Tensor<T>, Params<T>) {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = params.bias.len();
    let kk = k * k * c;
    let hw = h * w;
    let mut grads = params.zeros_like();
    let mut dx = Tensor::zeros(x.shape());
    let mut cols = vec![T::zero(); hw * kk];
    // The input gradient is a correlation of the output gradient with the
    // spatially flipped kernel, its channel axes swapped.
    let kg = k * k * cout;
    let mut flipped = vec![T::zero(); kg * c];
    let wd = params.weight.data();
    for ky in 0..k {
        for kx in 0..k {
            let src = ((k - 1 - ky) * k + (k - 1 - kx)) * c;
            let dst = (ky * k + kx) * cout;
            for ci in 0..c {
                for co in 0..cout {
                    flipped[(dst + co) * c + ci] = wd[(src + ci) * cout + co];
                }
            }
        }
    }
    let mut gcols = vec![T::zero(); hw * kg];
    for s in 0..n {
        im2col(
            &x.data()[s * hw * c..(s + 1) * hw * c],
            h,
            w,
            c,
            k,
            same_padding(k),
            &mut cols,
        );
        let gs = &g.data()[s * hw * cout..(s + 1) * hw * cout];
        matmul(
            MatRef::new(&cols, hw, kk).t(),
            MatRef::new(gs, hw, cout),
            grads.weight.data_mut(),
            true,
        );
        for row in gs.chunks_exact(cout) {
            for (b, &v) in grads.bias.data_mut().iter_mut().zip(row) {
                *b = *b + v;
            }
        }
        im2col(gs, h, w, cout, k, k - 1 - same_padding(k), &mut gcols);
        matmul(
            MatRef::new(&gcols, hw, kg),
            MatRef::new(&flipped, kg, c),
            &mut dx.data_mut()[s * hw * c..(s + 1) * hw * c],
            false,
        );
    }
    (dx, grads)
}

fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, PoolRecord) {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (pool_out(h), pool_out(w));
    let mut out = Tensor::zeros(&[n, oh, ow, c]);
    let mut argmax = vec![0u32; n * oh * ow * c];
    let xd = x.data();
    let od = out.data_mut();
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((s * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let mut best_idx = ((s * h + 2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = xd[best_idx];
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            let idx = ((s * h + y) * w + xx) * c + ch;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    od[obase + ch] = best;
                    argmax[obase + ch] = best_idx as u32;
                }
            }
        }
    }
    (
        out,
        PoolRecord {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    )
}

fn maxpool_backward<T: Scalar>(record: &PoolRecord, g: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(&record.input_shape);
    let d = dx.data_mut();
    for (&idx, &v) in record.argmax.iter().zip(g.data()) {
        d[idx as usize] = d[idx as usize] + v;
    }
    dx
}

fn dense_forward<T: Scalar>(x: &Tensor<T>, params: &Params<T>) -> Tensor<T> {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let units = params.bias.len();
    let mut out = Tensor::zeros(&[n, units]);
    for row in out.data_mut().chunks_exact_mut(units) {
        row.copy_from_slice(params.bias.data());
    }
    matmul(
        MatRef::new(x.data(), n, f),
        MatRef::new(params.weight.data(), f, units),
        out.data_mut(),
        true,
    );
    out
}

fn dense_backward<T: Scalar>(x: &Tensor<T>, params: &Params<T>, g: &Tensor<T>) -> (Tensor<T>, Params<T>) {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let units = params.bias.len();
    let mut grads = params.zeros_like();
    matmul(
        MatRef::new(x.data(), n, f).t(),
        MatRef::new(g.data(), n, units),
        grads.weight.data_mut(),
        false,
    );
    for row in g.data().chunks_exact(units) {
        for (b, &v) in grads.bias.data_mut().iter_mut().zip(row) {
            *b = *b + v;
        }
    }
    let mut dx = Tensor::zeros(&[n, f]);
    matmul(
        MatRef::new(g.data(), n, units),
        MatRef::new(params.weight.data(), f, units).t(),
        dx.data_mut(),
        false,
    );
    (dx, grads)
}

fn concat_forward<T: Scalar>(
    spec: &LayerSpec,
    inputs: &[&Tensor<T>],
) -> Result<(Tensor<T>, Vec<ConcatBranch>), TensorError> {
    if inputs.is_empty() {
        return Err(TensorError::InvalidLayer {
            layer: spec.describe(),
            reason: "needs at least one input".into(),
        });
    }
    for x in inputs {
        check_batch_shape(spec, x, 4)?;
        if x.batch() != inputs[0].batch() {
            return Err(spec.shape_error(&format!("batch {}", inputs[0].batch()), x.shape()));
        }
    }
    let n = inputs[0].batch();
    let th = inputs.iter().map(|x| x.shape()[1]).min().unwrap_or(0);
    let tw = inputs.iter().map(|x| x.shape()[2]).min().unwrap_or(0);
    let ctotal: usize = inputs.iter().map(|x| x.shape()[3]).sum();
    let mut out = Tensor::zeros(&[n, th, tw, ctotal]);
    let mut branches = Vec::with_capacity(inputs.len());
    let mut offset = 0;
    for x in inputs {
        let pools = alignment_pools(x.shape()[1], x.shape()[2], th, tw);
        let mut records = Vec::with_capacity(pools);
        let mut pooled: Option<Tensor<T>> = None;
        for _ in 0..pools {
            let (next, record) = maxpool_forward(pooled.as_ref().unwrap_or(x));
            records.push(record);
            pooled = Some(next);
        }
        let cur = pooled.as_ref().unwrap_or(x);
        let (h, w, c) = (cur.shape()[1], cur.shape()[2], cur.shape()[3]);
        let od = out.data_mut();
        for s in 0..n {
            for y in 0..th {
                for xx in 0..tw {
                    let src = ((s * h + y) * w + xx) * c;
                    let dst = ((s * th + y) * tw + xx) * ctotal + offset;
                    od[dst..dst + c].copy_from_slice(&cur.data()[src..src + c]);
                }
            }
        }
        branches.push(ConcatBranch {
            pools: records,
            pooled_shape: cur.shape().to_vec(),
            channels: c,
        });
        offset += c;
    }
    Ok((out, branches))
}

fn concat_backward<T: Scalar>(branches: &[ConcatBranch], g: &Tensor<T>) -> Vec<Tensor<T>> {
    let (n, th, tw, ctotal) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let mut offset = 0;
    let mut grads = Vec::with_capacity(branches.len());
    for branch in branches {
        let mut cur = Tensor::zeros(&branch.pooled_shape);
        let (h, w, c) = (branch.pooled_shape[1], branch.pooled_shape[2], branch.channels);
        let cd = cur.data_mut();
        for s in 0..n {
            for y in 0..th {
                for xx in 0..tw {
                    let dst = ((s * h + y) * w + xx) * c;
                    let src = ((s * th + y) * tw + xx) * ctotal + offset;
                    cd[dst..dst + c].copy_from_slice(&g.data()[src..src + c]);
                }
            }
        }
        for record in branch.pools.iter().rev() {
            cur = maxpool_backward(record, &cur);
        }
        grads.push(cur);
        offset += c;
    }
    grads
}
