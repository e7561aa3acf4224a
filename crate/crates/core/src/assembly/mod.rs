//! Genotype to network mapping.
//!
//! Each blueprint gene is replaced by a module drawn uniformly from the species
//! it points to. Junctions with several incoming branches become concat
//! layers, and the fixed classifier (flatten, hidden dense, output dense) is
//! appended at the end.

mod network;

pub use network::{
    infer_shapes, CompiledNetwork, EpochStats, LayerState, NetworkLayer, Provenance, ShapeInfo, Source, TrainError,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::{
    GenomeGraph, GenomeId, HyperparamRanges, IndividualGenome, InnovationId, LayerGene, ModuleGenome, SpeciesId,
    INPUT_NODE, OUTPUT_NODE,
};
use crate::tensor::{glorot_init, Activation, AdamConfig, AdamState, LayerSpec, Params, Tensor, TensorError};

/// Resampling attempts after the first when the assembled depth is out of range.
pub const DEPTH_RETRIES: usize = 3;

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("gene {gene} points at species {species}, which has no modules")]
    EmptySpecies { gene: InnovationId, species: SpeciesId },
    #[error("assembled depth {depth} outside [{min}, {max}] after {attempts} attempts")]
    Depth {
        depth: usize,
        min: usize,
        max: usize,
        attempts: usize,
    },
    #[error("no recorded module choice for gene {gene}")]
    MissingChoice { gene: InnovationId },
    #[error("module {module} chosen for gene {gene} is not available")]
    MissingModule { gene: InnovationId, module: GenomeId },
    #[error("genome graph is not a DAG")]
    Cyclic,
    #[error(transparent)]
    Shape(#[from] TensorError),
}

/// Module population grouped by species, members ordered by uid.
#[derive(Clone, Debug, Default)]
pub struct ModulePool {
    species: BTreeMap<SpeciesId, Vec<ModuleGenome>>,
}

impl ModulePool {
    pub fn from_modules(modules: &[ModuleGenome]) -> Self {
        let mut species: BTreeMap<SpeciesId, Vec<ModuleGenome>> = BTreeMap::new();
        for m in modules {
            if let Some(s) = m.species_id {
                species.entry(s).or_default().push(m.clone());
            }
        }
        for members in species.values_mut() {
            members.sort_by_key(|m| m.uid);
        }
        Self { species }
    }

    pub fn members(&self, species: SpeciesId) -> &[ModuleGenome] {
        self.species.get(&species).map_or(&[], Vec::as_slice)
    }

    pub fn species_ids(&self) -> Vec<SpeciesId> {
        self.species.keys().copied().collect()
    }

    pub fn find(&self, uid: GenomeId) -> Option<&ModuleGenome> {
        self.species.values().flatten().find(|m| m.uid == uid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChosenModule {
    pub gene: InnovationId,
    pub module: GenomeId,
}

#[derive(Clone, Debug)]
pub struct Assembled {
    pub network: CompiledNetwork,
    /// One entry per blueprint gene, in topological gene order.
    pub chosen: Vec<ChosenModule>,
}

pub fn layer_spec(gene: &LayerGene) -> LayerSpec {
    match *gene {
        LayerGene::Conv2d { kernel_size, filters } => LayerSpec::Conv2d {
            kernel_size,
            out_channels: filters,
            activation: Activation::Relu,
        },
        LayerGene::MaxPool2d => LayerSpec::MaxPool2d,
        LayerGene::Dropout { rate } => LayerSpec::Dropout { rate },
    }
}

#[derive(Default)]
struct Wiring {
    layers: Vec<(LayerSpec, Vec<Source>, Provenance)>,
}

impl Wiring {
    fn push(&mut self, spec: LayerSpec, inputs: Vec<Source>, provenance: Provenance) -> Source {
        self.layers.push((spec, inputs, provenance));
        Source::Layer(self.layers.len() - 1)
    }

    fn merge(&mut self, mut sources: Vec<Source>, gene: Option<InnovationId>) -> Source {
        let mut seen = Vec::with_capacity(sources.len());
        sources.retain(|s| {
            let fresh = !seen.contains(s);
            seen.push(*s);
            fresh
        });
        match sources.as_slice() {
            [one] => *one,
            _ => self.push(LayerSpec::Concat, sources, Provenance::Merge { gene }),
        }
    }
}

fn sources_of<G: GenomeGraph>(g: &G, node: InnovationId, outputs: &BTreeMap<InnovationId, Source>) -> Vec<Source> {
    g.predecessors(node)
        .iter()
        .filter_map(|p| outputs.get(p).copied())
        .collect()
}

fn splice_module(
    wiring: &mut Wiring,
    gene: InnovationId,
    module: &ModuleGenome,
    input: Source,
) -> Result<Source, AssemblyError> {
    let order = module.topological_order().ok_or(AssemblyError::Cyclic)?;
    let mut outputs = BTreeMap::from([(INPUT_NODE, input)]);
    for id in order {
        let Some(layer) = module.nodes.get(&id) else { continue };
        let inputs = sources_of(module, id, &outputs);
        let src = wiring.merge(inputs, Some(gene));
        let out = wiring.push(
            layer_spec(layer),
            vec![src],
            Provenance::Module {
                gene,
                module: module.uid,
                module_gene: id,
            },
        );
        outputs.insert(id, out);
    }
    let ends = sources_of(module, OUTPUT_NODE, &outputs);
    Ok(wiring.merge(ends, Some(gene)))
}

fn wire<'m, F>(ind: &IndividualGenome, mut pick: F) -> Result<(Wiring, Vec<ChosenModule>), AssemblyError>
where
    F: FnMut(InnovationId, SpeciesId) -> Result<&'m ModuleGenome, AssemblyError>,
{
    let order = ind.topological_order().ok_or(AssemblyError::Cyclic)?;
    let mut wiring = Wiring::default();
    let mut chosen = Vec::with_capacity(ind.nodes.len());
    let mut outputs = BTreeMap::from([(INPUT_NODE, Source::Input)]);
    for id in order {
        let Some(gene) = ind.nodes.get(&id) else { continue };
        let module = pick(id, gene.module_species)?;
        chosen.push(ChosenModule {
            gene: id,
            module: module.uid,
        });
        let input = wiring.merge(sources_of(ind, id, &outputs), None);
        let out = splice_module(&mut wiring, id, module, input)?;
        outputs.insert(id, out);
    }
    let features = wiring.merge(sources_of(ind, OUTPUT_NODE, &outputs), None);
    let flat = wiring.push(LayerSpec::Flatten, vec![features], Provenance::Flatten);
    let hidden = wiring.push(
        LayerSpec::Dense {
            units: ind.classifier.fc1_units,
            activation: Activation::Relu,
        },
        vec![flat],
        Provenance::Classifier,
    );
    wiring.push(
        LayerSpec::Dense {
            units: ind.classifier.num_classes,
            activation: Activation::Linear,
        },
        vec![hidden],
        Provenance::Classifier,
    );
    Ok((wiring, chosen))
}

/// Builds the network for `ind`. The output layer receives `ind.last_layer`;
/// every other trainable layer is freshly Glorot-initialised.
pub fn assemble<R: Rng + ?Sized>(
    ind: &IndividualGenome,
    pool: &ModulePool,
    input_shape: &[usize],
    ranges: &HyperparamRanges,
    adam: AdamConfig,
    rng: &mut R,
) -> Result<Assembled, AssemblyError> {
    let [min, max] = ranges.total_layers;
    let mut depth = 0;
    for _ in 0..=DEPTH_RETRIES {
        let (wiring, chosen) = wire(ind, |gene, species| {
            let members = pool.members(species);
            if members.is_empty() {
                return Err(AssemblyError::EmptySpecies { gene, species });
            }
            Ok(&members[rng.gen_range(0..members.len())])
        })?;
        depth = wiring
            .layers
            .iter()
            .filter(|(s, _, _)| network::counts_toward_depth(s))
            .count();
        if (min..=max).contains(&depth) {
            let mut network = compile(wiring, input_shape, adam, rng)?;
            network.inject_last_layer(&ind.last_layer)?;
            return Ok(Assembled { network, chosen });
        }
    }
    Err(AssemblyError::Depth {
        depth,
        min,
        max,
        attempts: DEPTH_RETRIES + 1,
    })
}

/// Rebuilds the network for `ind` from a recorded module choice, as stored
/// with the best genome. No depth check or resampling takes place.
pub fn assemble_with<R: Rng + ?Sized>(
    ind: &IndividualGenome,
    modules: &[ModuleGenome],
    chosen: &[ChosenModule],
    input_shape: &[usize],
    adam: AdamConfig,
    rng: &mut R,
) -> Result<Assembled, AssemblyError> {
    let (wiring, chosen) = wire(ind, |gene, _| {
        let uid = chosen
            .iter()
            .find(|c| c.gene == gene)
            .ok_or(AssemblyError::MissingChoice { gene })?
            .module;
        modules
            .iter()
            .find(|m| m.uid == uid)
            .ok_or(AssemblyError::MissingModule { gene, module: uid })
    })?;
    let mut network = compile(wiring, input_shape, adam, rng)?;
    network.inject_last_layer(&ind.last_layer)?;
    Ok(Assembled { network, chosen })
}

fn compile<R: Rng + ?Sized>(
    wiring: Wiring,
    input_shape: &[usize],
    adam: AdamConfig,
    rng: &mut R,
) -> Result<CompiledNetwork, TensorError> {
    let plain: Vec<_> = wiring.layers.iter().map(|(s, i, _)| (s.clone(), i.clone())).collect();
    let shapes = infer_shapes(&plain, input_shape)?;
    let layers = wiring
        .layers
        .into_iter()
        .enumerate()
        .map(|(k, (spec, inputs, provenance))| {
            let input = &shapes.inputs[k][0];
            let params = spec.param_shapes(input).map(|(ws, bs)| {
                let (fan_in, fan_out) = spec.fans(input).expect("trainable layer");
                Params {
                    weight: glorot_init(fan_in, fan_out, &ws, rng),
                    bias: Tensor::zeros(&bs),
                }
            });
            let optimizer = params.as_ref().map(|p| LayerState {
                weight: AdamState::new(p.weight.shape()),
                bias: AdamState::new(p.bias.shape()),
            });
            NetworkLayer {
                spec,
                inputs,
                output_shape: shapes.outputs[k].clone(),
                params,
                optimizer,
                provenance,
            }
        })
        .collect();
    Ok(CompiledNetwork {
        layers,
        input_shape: input_shape.to_vec(),
        adam,
    })
}

/// Graphviz rendering: one node per layer labelled with its kind and
/// hyperparameters, edges following the wiring.
pub fn to_dot(network: &CompiledNetwork, include_io: bool) -> String {
    let mut s = String::from("digraph network {\n  rankdir=TB;\n  node [shape=box];\n");
    if include_io {
        let dims: Vec<String> = network.input_shape.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "  input [label=\"input {}\"];", dims.join("x"));
    }
    for (i, l) in network.layers.iter().enumerate() {
        let _ = writeln!(s, "  l{i} [label=\"{}\"];", l.spec.describe());
    }
    if include_io {
        let _ = writeln!(s, "  output [label=\"output {}\"];", network.num_classes());
    }
    for (i, l) in network.layers.iter().enumerate() {
        for src in &l.inputs {
            match *src {
                Source::Layer(j) => {
                    let _ = writeln!(s, "  l{j} -> l{i};");
                }
                Source::Input if include_io => {
                    let _ = writeln!(s, "  input -> l{i};");
                }
                Source::Input => {}
            }
        }
    }
    if include_io && !network.layers.is_empty() {
        let _ = writeln!(s, "  l{} -> output;", network.last_layer_index());
    }
    s.push_str("}\n");
    s
}
