//! Layer gradients against central finite differences.
//!
//! The analytic pass runs in `f32`, the kernel under test. The reference
//! differences are taken in `f64` through the same generic kernel at the same
//! point (all sampled values are exactly representable in `f32`), so the
//! comparison measures the single-precision backward pass rather than the
//! truncation error of a single-precision difference quotient.

#![allow(dead_code)]

use lcodeepneat::tensor::{
    backward_layer, forward_layer, softmax_cross_entropy, Activation, LayerSpec, Mode, Params, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checks::Check;

const STEP: f64 = 1e-6;
const SAMPLES_PER_TENSOR: usize = 40;

enum Case {
    Layer {
        spec: LayerSpec,
        inputs: Vec<Tensor<f64>>,
        params: Option<Params<f64>>,
    },
    Loss {
        logits: Tensor<f64>,
        labels: Vec<usize>,
    },
}

fn tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| f64::from(rng.gen_range(-1.0f32..1.0))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn activation(rng: &mut ChaCha8Rng) -> Activation {
    if rng.gen() {
        Activation::Relu
    } else {
        Activation::Linear
    }
}

fn case(kind: usize, rng: &mut ChaCha8Rng) -> Case {
    let n = rng.gen_range(1..=3);
    let image = |rng: &mut ChaCha8Rng, lo: usize, hi: usize, c: usize| {
        let (h, w) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
        tensor(&[n, h, w, c], rng)
    };
    match kind {
        0 | 1 => {
            let k = rng.gen_range(2..=7);
            let cin = rng.gen_range(1..=4);
            let cout = rng.gen_range(1..=5);
            let x = image(rng, 3, 8, cin);
            let spec = LayerSpec::Conv2d {
                kernel_size: k,
                out_channels: cout,
                activation: if kind == 0 { Activation::Relu } else { activation(rng) },
            };
            let params = Params {
                weight: tensor(&[k, k, cin, cout], rng),
                bias: tensor(&[cout], rng),
            };
            Case::Layer {
                spec,
                inputs: vec![x],
                params: Some(params),
            }
        }
        2 | 3 => {
            let fan_in = rng.gen_range(2..=24);
            let units = rng.gen_range(1..=8);
            let spec = LayerSpec::Dense {
                units,
                activation: if kind == 2 {
                    Activation::Relu
                } else {
                    Activation::Linear
                },
            };
            let params = Params {
                weight: tensor(&[fan_in, units], rng),
                bias: tensor(&[units], rng),
            };
            Case::Layer {
                spec,
                inputs: vec![tensor(&[n, fan_in], rng)],
                params: Some(params),
            }
        }
        4 => {
            let c = rng.gen_range(1..=3);
            Case::Layer {
                spec: LayerSpec::MaxPool2d,
                inputs: vec![image(rng, 2, 9, c)],
                params: None,
            }
        }
        5 => {
            let c = rng.gen_range(1..=3);
            Case::Layer {
                spec: LayerSpec::Dropout {
                    rate: rng.gen_range(0.1..0.9),
                },
                inputs: vec![image(rng, 2, 6, c)],
                params: None,
            }
        }
        6 => {
            let branches = rng.gen_range(2..=3);
            let inputs = (0..branches)
                .map(|_| {
                    let c = rng.gen_range(1..=3);
                    image(rng, 2, 10, c)
                })
                .collect();
            Case::Layer {
                spec: LayerSpec::Concat,
                inputs,
                params: None,
            }
        }
        7 => {
            let c = rng.gen_range(1..=3);
            Case::Layer {
                spec: LayerSpec::Flatten,
                inputs: vec![image(rng, 1, 5, c)],
                params: None,
            }
        }
        _ => {
            let classes = rng.gen_range(2..=10);
            let logits = tensor(&[n, classes], rng).map(|v| 4.0 * v);
            let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            Case::Loss { logits, labels }
        }
    }
}

const KINDS: usize = 9;

fn kind_name(kind: usize) -> &'static str {
    [
        "conv relu",
        "conv",
        "dense relu",
        "dense linear",
        "maxpool",
        "dropout",
        "concat",
        "flatten",
        "softmax loss",
    ][kind]
}

/// Indices to probe in a tensor of `len` elements.
fn probes(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= SAMPLES_PER_TENSOR {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, SAMPLES_PER_TENSOR).into_vec()
    }
}

/// Norm-wise relative error between analytic and numeric gradients over the probed coordinates.
fn relative_error(pairs: &[(f64, f64)]) -> f64 {
    let diff = pairs.iter().map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na = pairs.iter().map(|(a, _)| a * a).sum::<f64>().sqrt();
    let nb = pairs.iter().map(|(_, b)| b * b).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// `sum(layer(inputs) * projection)` with the dropout mask fixed by `mask_seed`.
fn projected<T: lcodeepneat::tensor::Scalar>(
    spec: &LayerSpec,
    params: Option<&Params<T>>,
    inputs: &[Tensor<T>],
    projection: &Tensor<T>,
    mask_seed: u64,
) -> f64 {
    let refs: Vec<&Tensor<T>> = inputs.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (y, _) = forward_layer(spec, params, &refs, Mode::Train, &mut rng).unwrap();
    let (y, projection) = (y.cast::<f64>(), projection.cast::<f64>());
    y.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum()
}

fn cast_params(p: &Params<f64>) -> Params<f32> {
    Params {
        weight: p.weight.cast(),
        bias: p.bias.cast(),
    }
}

fn check_layer(spec: &LayerSpec, inputs: &[Tensor<f64>], params: Option<&Params<f64>>, rng: &mut ChaCha8Rng) -> f64 {
    let mask_seed = rng.gen();
    let inputs32: Vec<Tensor<f32>> = inputs.iter().map(Tensor::cast).collect();
    let params32 = params.map(cast_params);
    let refs: Vec<&Tensor<f32>> = inputs32.iter().collect();
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (y, cache) = forward_layer(spec, params32.as_ref(), &refs, Mode::Train, &mut mask_rng).unwrap();
    let projection = tensor(y.shape(), rng);
    let (dx, dp) = backward_layer(spec, params32.as_ref(), &cache, &projection.cast()).unwrap();

    let mut pairs = Vec::new();
    for (t, grad) in dx.iter().enumerate() {
        for i in probes(inputs[t].len(), rng) {
            let eval = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[t].data_mut()[i] += delta;
                projected(spec, params, &moved, &projection, mask_seed)
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            pairs.push((f64::from(grad.data()[i]), numeric));
        }
    }
    if let (Some(p), Some(g)) = (params, dp.as_ref()) {
        for which in 0..2 {
            let (len, grad) = if which == 0 {
                (p.weight.len(), g.weight.data())
            } else {
                (p.bias.len(), g.bias.data())
            };
            for i in probes(len, rng) {
                let eval = |delta: f64| {
                    let mut moved = p.clone();
                    let target = if which == 0 { &mut moved.weight } else { &mut moved.bias };
                    target.data_mut()[i] += delta;
                    projected(spec, Some(&moved), inputs, &projection, mask_seed)
                };
                let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
                pairs.push((f64::from(grad[i]), numeric));
            }
        }
    }
    relative_error(&pairs)
}

fn check_loss(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (_, grad) = softmax_cross_entropy(&logits.cast::<f32>(), labels).unwrap();
    let pairs: Vec<(f64, f64)> = (0..logits.len())
        .map(|i| {
            let eval = |delta: f64| {
                let mut moved = logits.clone();
                moved.data_mut()[i] += delta;
                softmax_cross_entropy(&moved, labels).unwrap().0
            };
            (f64::from(grad.data()[i]), (eval(STEP) - eval(-STEP)) / (2.0 * STEP))
        })
        .collect();
    relative_error(&pairs)
}

/// Runs `configs` randomized configurations, cycling through every layer
/// kind and the loss, and fails on the first relative error at or above `tolerance`.
pub fn layer_gradients(configs: usize, tolerance: f64, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, "");
    for c in 0..configs {
        let kind = c % KINDS;
        let err = match case(kind, &mut rng) {
            Case::Layer { spec, inputs, params } => check_layer(&spec, &inputs, params.as_ref(), &mut rng),
            Case::Loss { logits, labels } => check_loss(&logits, &labels),
        };
        if err.is_nan() || err >= tolerance {
            return Err(format!(
                "configuration {c} ({}): relative error {err:.3e} >= {tolerance:e}",
                kind_name(kind)
            ));
        }
        if err > worst.0 {
            worst = (err, kind_name(kind));
        }
    }
    Ok(format!(
        "{configs} configurations over {KINDS} kinds, worst relative error {:.2e} ({})",
        worst.0, worst.1
    ))
}
