use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{batch_indices, Dataset};
use crate::genome::{GenomeId, InnovationId, LastLayerParams};
use crate::tensor::{
    adam_step_with, backward_layer, forward_layer, softmax_cross_entropy, AdamConfig, AdamState, Cache, LayerSpec,
    Mode, Params, Tensor, TensorError,
};

/// Where a layer's input comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Input,
    Layer(usize),
}

/// Which part of the genotype produced a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Module {
        gene: InnovationId,
        module: GenomeId,
        module_gene: InnovationId,
    },
    /// Concat inserted where branches meet; `gene` is the blueprint gene whose
    /// module contains the junction, or `None` at blueprint level.
    Merge {
        gene: Option<InnovationId>,
    },
    Flatten,
    Classifier,
}

#[derive(Clone, Debug)]
pub struct LayerState {
    pub weight: AdamState<f32>,
    pub bias: AdamState<f32>,
}

#[derive(Clone, Debug)]
pub struct NetworkLayer {
    pub spec: LayerSpec,
    pub inputs: Vec<Source>,
    pub output_shape: Vec<usize>,
    pub params: Option<Params<f32>>,
    pub optimizer: Option<LayerState>,
    pub provenance: Provenance,
}

/// Per-layer input and output shapes, without the batch dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeInfo {
    pub inputs: Vec<Vec<Vec<usize>>>,
    pub outputs: Vec<Vec<usize>>,
}

/// Propagates shapes through `wiring` in index order.
pub fn infer_shapes(wiring: &[(LayerSpec, Vec<Source>)], input_shape: &[usize]) -> Result<ShapeInfo, TensorError> {
    let mut info = ShapeInfo {
        inputs: Vec::with_capacity(wiring.len()),
        outputs: Vec::with_capacity(wiring.len()),
    };
    for (i, (spec, sources)) in wiring.iter().enumerate() {
        let mut shapes = Vec::with_capacity(sources.len());
        for s in sources {
            shapes.push(match *s {
                Source::Input => input_shape.to_vec(),
                Source::Layer(j) if j < i => info.outputs[j].clone(),
                Source::Layer(j) => {
                    return Err(TensorError::InvalidLayer {
                        layer: spec.describe(),
                        reason: format!("layer {i} reads layer {j}, which is not upstream"),
                    })
                }
            });
        }
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let out = spec.output_shape(&refs)?;
        info.inputs.push(shapes);
        info.outputs.push(out);
    }
    Ok(info)
}

/// Executable layer graph. Layers are stored in topological order, so every
/// source index is smaller than the layer reading it; the last layer is the
/// output dense layer.
#[derive(Clone, Debug)]
pub struct CompiledNetwork {
    pub layers: Vec<NetworkLayer>,
    pub input_shape: Vec<usize>,
    pub adam: AdamConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at step {step}: non-finite loss or parameters")]
    Diverged { step: usize },
}

impl CompiledNetwork {
    pub fn last_layer_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_shape[0])
    }

    /// Sum of weight and bias element counts over all layers.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .map(Params::len)
            .sum()
    }

    pub fn dense_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.spec, LayerSpec::Dense { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Conv, pool, dropout and dense layers.
    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| counts_toward_depth(&l.spec)).count()
    }

    pub fn shapes(&self) -> Result<ShapeInfo, TensorError> {
        let wiring: Vec<_> = self.layers.iter().map(|l| (l.spec.clone(), l.inputs.clone())).collect();
        infer_shapes(&wiring, &self.input_shape)
    }

    /// Overwrites the output layer's parameters.
    pub fn inject_last_layer(&mut self, p: &LastLayerParams) -> Result<(), TensorError> {
        let last = self.layers.last_mut().expect("network has layers");
        let params = last.params.as_mut().expect("output layer is dense");
        let want = [params.weight.shape()[0], params.weight.shape()[1]];
        if [p.rows, p.cols] != want || !p.is_consistent() {
            return Err(TensorError::ShapeMismatch {
                layer: last.spec.describe(),
                expected: format!("{} x {} weights", want[0], want[1]),
                found: vec![p.rows, p.cols],
            });
        }
        params.weight.data_mut().copy_from_slice(&p.weights);
        params.bias.data_mut().copy_from_slice(&p.biases);
        Ok(())
    }

    pub fn extract_last_layer(&self) -> LastLayerParams {
        let params = self
            .layers
            .last()
            .and_then(|l| l.params.as_ref())
            .expect("output layer is dense");
        LastLayerParams {
            rows: params.weight.shape()[0],
            cols: params.weight.shape()[1],
            weights: params.weight.data().to_vec(),
            biases: params.bias.data().to_vec(),
        }
    }

    fn last_uses(&self) -> Vec<usize> {
        let mut last = vec![0; self.layers.len()];
        for (i, l) in self.layers.iter().enumerate() {
            for s in &l.inputs {
                if let Source::Layer(j) = *s {
                    last[j] = i;
                }
            }
        }
        last
    }

    /// Runs the network on a batch `N x H x W x C`, returning logits and, in
    /// train mode, the per-layer caches.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor<f32>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<f32>, Vec<Cache<f32>>), TensorError> {
        let last_uses = self.last_uses();
        let final_index = self.last_layer_index();
        let mut outputs: Vec<Option<Tensor<f32>>> = vec![None; self.layers.len()];
        let mut caches = Vec::with_capacity(if mode == Mode::Train { self.layers.len() } else { 0 });
        for (i, layer) in self.layers.iter().enumerate() {
            let inputs: Vec<&Tensor<f32>> = layer
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Input => x,
                    Source::Layer(j) => outputs[j].as_ref().expect("upstream output retained"),
                })
                .collect();
            let (y, cache) = forward_layer(&layer.spec, layer.params.as_ref(), &inputs, mode, rng)?;
            outputs[i] = Some(y);
            if mode == Mode::Train {
                caches.push(cache);
            }
            for s in &layer.inputs {
                if let Source::Layer(j) = *s {
                    if last_uses[j] == i {
                        outputs[j] = None;
                    }
                }
            }
        }
        Ok((outputs[final_index].take().expect("final output"), caches))
    }

    /// Backpropagates `grad_logits` and returns parameter gradients per layer.
    pub fn backward(
        &self,
        caches: &[Cache<f32>],
        grad_logits: Tensor<f32>,
    ) -> Result<Vec<Option<Params<f32>>>, TensorError> {
        let n = self.layers.len();
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; n];
        let mut param_grads = vec![None; n];
        grads[n - 1] = Some(grad_logits);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let layer = &self.layers[i];
            let (input_grads, pg) = backward_layer(&layer.spec, layer.params.as_ref(), &caches[i], &g)?;
            param_grads[i] = pg;
            for (s, ig) in layer.inputs.iter().zip(input_grads) {
                if let Source::Layer(j) = *s {
                    match &mut grads[j] {
                        Some(acc) => acc.add_assign(&ig),
                        slot => *slot = Some(ig),
                    }
                }
            }
        }
        Ok(param_grads)
    }

    /// One Adam step on a batch; returns the batch loss.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor<f32>,
        labels: &[usize],
        rng: &mut R,
    ) -> Result<f64, TensorError> {
        let (logits, caches) = self.forward(x, Mode::Train, rng)?;
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        let grads = self.backward(&caches, grad)?;
        drop(caches);
        let adam = self.adam;
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            if let (Some(p), Some(g), Some(state)) = (layer.params.as_mut(), g, layer.optimizer.as_mut()) {
                adam_step_with(&mut p.weight, &g.weight, &mut state.weight, &adam)?;
                adam_step_with(&mut p.bias, &g.bias, &mut state.bias, &adam)?;
            }
        }
        Ok(f64::from(loss))
    }

    fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .all(|p| p.weight.all_finite() && p.bias.all_finite())
    }

    /// One shuffled pass over `ds` in mini-batches of `batch_size`.
    pub fn train_epoch<R: Rng + ?Sized>(
        &mut self,
        ds: &Dataset,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<EpochStats, TrainError> {
        let mut total = 0.0;
        let batches = batch_indices(ds.len(), batch_size, true, rng);
        for (step, idx) in batches.iter().enumerate() {
            let x = ds.images.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            let loss = self.train_step(&x, &labels, rng)?;
            if !loss.is_finite() || !self.params_finite() {
                return Err(TrainError::Diverged { step });
            }
            total += loss * idx.len() as f64;
        }
        Ok(EpochStats {
            mean_loss: if ds.is_empty() { 0.0 } else { total / ds.len() as f64 },
            steps: batches.len(),
        })
    }

    /// Predicted class per sample, evaluated in chunks.
    pub fn predict<R: Rng + ?Sized>(&self, ds: &Dataset, rng: &mut R) -> Result<Vec<usize>, TensorError> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(ds.len());
        let all: Vec<usize> = (0..ds.len()).collect();
        for idx in all.chunks(CHUNK) {
            let (logits, _) = self.forward(&ds.images.select_rows(idx), Mode::Infer, rng)?;
            let c = logits.shape()[1];
            out.extend(logits.data().chunks(c).map(|row| {
                row.iter()
                    .enumerate()
                    .fold(0, |best, (k, &v)| if v > row[best] { k } else { best })
            }));
        }
        Ok(out)
    }

    /// Fraction of correctly classified samples.
    pub fn accuracy<R: Rng + ?Sized>(&self, ds: &Dataset, rng: &mut R) -> Result<f64, TensorError> {
        if ds.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(ds, rng)?;
        let correct = pred.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / ds.len() as f64)
    }

    /// Mean cross-entropy over `ds`.
    pub fn loss<R: Rng + ?Sized>(&self, ds: &Dataset, rng: &mut R) -> Result<f64, TensorError> {
        let mut total = 0.0;
        let all: Vec<usize> = (0..ds.len()).collect();
        for idx in all.chunks(256) {
            let (logits, _) = self.forward(&ds.images.select_rows(idx), Mode::Infer, rng)?;
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            total += f64::from(softmax_cross_entropy(&logits, &labels)?.0) * idx.len() as f64;
        }
        Ok(total / ds.len().max(1) as f64)
    }
}

pub(crate) fn counts_toward_depth(spec: &LayerSpec) -> bool {
    matches!(
        spec,
        LayerSpec::Conv2d { .. } | LayerSpec::MaxPool2d | LayerSpec::Dropout { .. } | LayerSpec::Dense { .. }
    )
}
