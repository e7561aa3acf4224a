//! Genotypes of the two co-evolved populations.
//!
//! A [`ModuleGenome`] is a small DAG of layer genes. An [`IndividualGenome`]
//! (blueprint) is a DAG whose genes point at module species, followed by a
//! fixed two-layer dense classifier whose final layer parameters live in the
//! genome itself so trained values can be written back and inherited.

mod graph;
mod serialize;

pub use graph::{Edge, GenomeGraph};
pub use serialize::{
    individual_from_json, individual_to_json, module_from_json, module_to_json, GenomeDocument, SCHEMA_VERSION,
};

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::glorot_init;

pub type InnovationId = u64;
pub type GenomeId = u64;
pub type SpeciesId = u64;

/// Virtual input endpoint shared by every genome graph.
pub const INPUT_NODE: InnovationId = 0;
/// Virtual output endpoint shared by every genome graph.
pub const OUTPUT_NODE: InnovationId = 1;

/// Run-wide source of fresh ids for structural additions.
///
/// Shared by both populations; ids start after the two reserved endpoints.
#[derive(Debug)]
pub struct InnovationCounter {
    next: AtomicU64,
}

impl InnovationCounter {
    pub fn new() -> Self {
        Self::starting_at(OUTPUT_NODE + 1)
    }

    pub fn starting_at(next: u64) -> Self {
        Self {
            next: AtomicU64::new(next),
        }
    }

    pub fn next_id(&self) -> InnovationId {
        self.next.fetch_add(1, Ordering::Relaxed)
    }

    pub fn peek(&self) -> InnovationId {
        self.next.load(Ordering::Relaxed)
    }
}

impl Default for InnovationCounter {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for InnovationCounter {
    fn clone(&self) -> Self {
        Self::starting_at(self.peek())
    }
}

impl Serialize for InnovationCounter {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(self.peek())
    }
}

impl<'de> Deserialize<'de> for InnovationCounter {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        u64::deserialize(d).map(Self::starting_at)
    }
}

/// Search-space bounds for layer hyperparameters (inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperparamRanges {
    pub conv_filters: [usize; 2],
    pub fc_units: [usize; 2],
    pub kernel: [usize; 2],
    pub total_layers: [usize; 2],
    pub dropout: [f64; 2],
}

impl Default for HyperparamRanges {
    fn default() -> Self {
        Self {
            conv_filters: [32, 80],
            fc_units: [128, 800],
            kernel: [2, 7],
            total_layers: [4, 20],
            dropout: [0.1, 0.9],
        }
    }
}

impl HyperparamRanges {
    pub fn validate(&self) -> Result<(), String> {
        let int_ranges = [
            ("conv_filters", self.conv_filters),
            ("fc_units", self.fc_units),
            ("kernel", self.kernel),
            ("total_layers", self.total_layers),
        ];
        for (name, [lo, hi]) in int_ranges {
            if lo == 0 || lo > hi {
                return Err(format!("{name} range [{lo}, {hi}] is empty or starts at zero"));
            }
        }
        let [lo, hi] = self.dropout;
        if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) || lo > hi {
            return Err(format!("dropout range [{lo}, {hi}] must lie in [0, 1)"));
        }
        Ok(())
    }

    fn span(range: [usize; 2]) -> f64 {
        (range[1] - range[0]).max(1) as f64
    }

    pub fn sample_kernel<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.kernel[0]..=self.kernel[1])
    }

    pub fn sample_filters<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.conv_filters[0]..=self.conv_filters[1])
    }

    pub fn sample_dropout<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.gen_range(self.dropout[0]..=self.dropout[1])
    }

    pub fn sample_fc_units<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.fc_units[0]..=self.fc_units[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerGene {
    Conv2d { kernel_size: usize, filters: usize },
    MaxPool2d,
    Dropout { rate: f64 },
}

impl LayerGene {
    pub fn random_conv<R: Rng + ?Sized>(rng: &mut R, ranges: &HyperparamRanges) -> Self {
        let kernel_size = ranges.sample_kernel(rng);
        let filters = ranges.sample_filters(rng);
        LayerGene::Conv2d { kernel_size, filters }
    }

    pub fn has_hyperparams(&self) -> bool {
        !matches!(self, LayerGene::MaxPool2d)
    }

    pub fn in_range(&self, ranges: &HyperparamRanges) -> bool {
        match *self {
            LayerGene::Conv2d { kernel_size, filters } => {
                (ranges.kernel[0]..=ranges.kernel[1]).contains(&kernel_size)
                    && (ranges.conv_filters[0]..=ranges.conv_filters[1]).contains(&filters)
            }
            LayerGene::MaxPool2d => true,
            LayerGene::Dropout { rate } => (ranges.dropout[0]..=ranges.dropout[1]).contains(&rate),
        }
    }

    /// Mean hyperparameter difference normalised by range width, in `[0, 1]`.
    pub fn hyper_distance(&self, other: &LayerGene, ranges: &HyperparamRanges) -> f64 {
        match (self, other) {
            (
                LayerGene::Conv2d {
                    kernel_size: k1,
                    filters: f1,
                },
                LayerGene::Conv2d {
                    kernel_size: k2,
                    filters: f2,
                },
            ) => {
                let dk = k1.abs_diff(*k2) as f64 / HyperparamRanges::span(ranges.kernel);
                let df = f1.abs_diff(*f2) as f64 / HyperparamRanges::span(ranges.conv_filters);
                (dk.min(1.0) + df.min(1.0)) / 2.0
            }
            (LayerGene::MaxPool2d, LayerGene::MaxPool2d) => 0.0,
            (LayerGene::Dropout { rate: a }, LayerGene::Dropout { rate: b }) => {
                let width = (ranges.dropout[1] - ranges.dropout[0]).max(f64::EPSILON);
                ((a - b).abs() / width).min(1.0)
            }
            _ => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlueprintGene {
    pub module_species: SpeciesId,
}

/// Fixed classifier segment: hidden dense layer of `fc1_units`, then the output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classifier {
    pub fc1_units: usize,
    pub num_classes: usize,
}

/// Weights (`rows x cols`, row-major) and biases of the output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LastLayerParams {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
}

impl LastLayerParams {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            biases: vec![0.0; cols],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let weights = glorot_init::<f32, R>(rows, cols, &[rows, cols], rng).into_data();
        Self {
            rows,
            cols,
            weights,
            biases: vec![0.0; cols],
        }
    }

    pub fn same_shape(&self, other: &LastLayerParams) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_consistent(&self) -> bool {
        self.weights.len() == self.rows * self.cols && self.biases.len() == self.cols
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|v| v.is_finite())
    }
}

/// One invariant violation found by `validate`.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Empty,
    Cycle,
    EndpointAsGene,
    Disconnected,
    DanglingEdge {
        edge: InnovationId,
        node: InnovationId,
    },
    SelfLoop {
        edge: InnovationId,
    },
    DuplicateEdge {
        edge: InnovationId,
    },
    EndpointDirection {
        edge: InnovationId,
    },
    Unreachable {
        node: InnovationId,
    },
    DeadEnd {
        node: InnovationId,
    },
    HyperparamOutOfRange {
        node: InnovationId,
    },
    Fc1OutOfRange {
        fc1_units: usize,
    },
    ClassifierWeightsMismatch {
        fc1_units: usize,
        num_classes: usize,
        rows: usize,
        cols: usize,
    },
    NonFiniteWeights,
    DanglingSpeciesPointer {
        node: InnovationId,
        species: SpeciesId,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "empty genome"),
            Violation::Cycle => write!(f, "cycle"),
            Violation::EndpointAsGene => write!(f, "endpoint id used as a gene"),
            Violation::Disconnected => write!(f, "no path from input to output"),
            Violation::DanglingEdge { edge, node } => write!(f, "edge {edge} references unknown node {node}"),
            Violation::SelfLoop { edge } => write!(f, "edge {edge} is a self loop"),
            Violation::DuplicateEdge { edge } => write!(f, "edge {edge} duplicates another connection"),
            Violation::EndpointDirection { edge } => write!(f, "edge {edge} enters the input or leaves the output"),
            Violation::Unreachable { node } => write!(f, "node {node} unreachable from input"),
            Violation::DeadEnd { node } => write!(f, "node {node} does not reach output"),
            Violation::HyperparamOutOfRange { node } => write!(f, "node {node} hyperparameters out of range"),
            Violation::Fc1OutOfRange { fc1_units } => write!(f, "fc1 units {fc1_units} out of range"),
            Violation::ClassifierWeightsMismatch {
                fc1_units,
                num_classes,
                rows,
                cols,
            } => write!(
                f,
                "classifier/weights mismatch: classifier {fc1_units}x{num_classes}, last layer {rows}x{cols}"
            ),
            Violation::NonFiniteWeights => write!(f, "non-finite last-layer values"),
            Violation::DanglingSpeciesPointer { node, species } => {
                write!(f, "node {node} points at missing species {species}")
            }
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GenomeError {
    #[error("no module species to point at")]
    NoModuleSpecies,
    #[error("invalid genome: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("genome document: {0}")]
    Document(String),
}

/// Common view of both genome kinds used by speciation and reproduction.
pub trait Genome: GenomeGraph + Clone + Send + Sync {
    fn uid(&self) -> GenomeId;
    fn set_uid(&mut self, uid: GenomeId);
    fn fitness(&self) -> f64;
    fn set_fitness(&mut self, fitness: f64);
    fn age(&self) -> u32;
    fn set_age(&mut self, age: u32);
    fn species_id(&self) -> Option<SpeciesId>;
    fn set_species_id(&mut self, species: Option<SpeciesId>);
    /// Normalised hyperparameter difference between two matching genes, in `[0, 1]`.
    fn gene_distance(a: &Self::Gene, b: &Self::Gene, ranges: &HyperparamRanges) -> f64;
}

macro_rules! genome_accessors {
    () => {
        fn uid(&self) -> GenomeId {
            self.uid
        }
        fn set_uid(&mut self, uid: GenomeId) {
            self.uid = uid;
        }
        fn fitness(&self) -> f64 {
            self.fitness
        }
        fn set_fitness(&mut self, fitness: f64) {
            self.fitness = fitness;
        }
        fn age(&self) -> u32 {
            self.age
        }
        fn set_age(&mut self, age: u32) {
            self.age = age;
        }
        fn species_id(&self) -> Option<SpeciesId> {
            self.species_id
        }
        fn set_species_id(&mut self, species: Option<SpeciesId>) {
            self.species_id = species;
        }
    };
}

impl Genome for ModuleGenome {
    genome_accessors!();

    fn gene_distance(a: &LayerGene, b: &LayerGene, ranges: &HyperparamRanges) -> f64 {
        a.hyper_distance(b, ranges)
    }
}

impl Genome for IndividualGenome {
    genome_accessors!();

    fn gene_distance(a: &BlueprintGene, b: &BlueprintGene, _: &HyperparamRanges) -> f64 {
        if a.module_species == b.module_species {
            0.0
        } else {
            1.0
        }
    }
}

/// Small CNN fragment: a DAG of conv / pool / dropout genes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleGenome {
    pub uid: GenomeId,
    pub nodes: BTreeMap<InnovationId, LayerGene>,
    pub edges: BTreeMap<InnovationId, Edge>,
    pub fitness: f64,
    pub age: u32,
    pub species_id: Option<SpeciesId>,
}

impl GenomeGraph for ModuleGenome {
    type Gene = LayerGene;

    fn nodes(&self) -> &BTreeMap<InnovationId, LayerGene> {
        &self.nodes
    }
    fn nodes_mut(&mut self) -> &mut BTreeMap<InnovationId, LayerGene> {
        &mut self.nodes
    }
    fn edges(&self) -> &BTreeMap<InnovationId, Edge> {
        &self.edges
    }
    fn edges_mut(&mut self) -> &mut BTreeMap<InnovationId, Edge> {
        &mut self.edges
    }
}

impl ModuleGenome {
    /// A single convolution between the input and output endpoints.
    pub fn new_random<R: Rng + ?Sized>(
        uid: GenomeId,
        rng: &mut R,
        ranges: &HyperparamRanges,
        counter: &InnovationCounter,
    ) -> Self {
        let gene = counter.next_id();
        let nodes = BTreeMap::from([(gene, LayerGene::random_conv(rng, ranges))]);
        let mut edges = BTreeMap::new();
        edges.insert(
            counter.next_id(),
            Edge {
                from: INPUT_NODE,
                to: gene,
            },
        );
        edges.insert(
            counter.next_id(),
            Edge {
                from: gene,
                to: OUTPUT_NODE,
            },
        );
        Self {
            uid,
            nodes,
            edges,
            fitness: 0.0,
            age: 0,
            species_id: None,
        }
    }

    pub fn validate(&self, ranges: &HyperparamRanges) -> Result<(), Vec<Violation>> {
        let mut v = self.structural_violations();
        for (&id, gene) in &self.nodes {
            if !gene.in_range(ranges) {
                v.push(Violation::HyperparamOutOfRange { node: id });
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    /// Layer genes in topological order.
    pub fn layers_in_order(&self) -> Vec<(InnovationId, &LayerGene)> {
        self.topological_order()
            .unwrap_or_default()
            .into_iter()
            .filter_map(|id| self.nodes.get(&id).map(|g| (id, g)))
            .collect()
    }
}

/// Blueprint genome: species pointers plus the classifier and its inherited last layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndividualGenome {
    pub uid: GenomeId,
    pub nodes: BTreeMap<InnovationId, BlueprintGene>,
    pub edges: BTreeMap<InnovationId, Edge>,
    pub classifier: Classifier,
    pub last_layer: LastLayerParams,
    pub fitness: f64,
    pub age: u32,
    pub species_id: Option<SpeciesId>,
}

impl GenomeGraph for IndividualGenome {
    type Gene = BlueprintGene;

    fn nodes(&self) -> &BTreeMap<InnovationId, BlueprintGene> {
        &self.nodes
    }
    fn nodes_mut(&mut self) -> &mut BTreeMap<InnovationId, BlueprintGene> {
        &mut self.nodes
    }
    fn edges(&self) -> &BTreeMap<InnovationId, Edge> {
        &self.edges
    }
    fn edges_mut(&mut self) -> &mut BTreeMap<InnovationId, Edge> {
        &mut self.edges
    }
}

impl IndividualGenome {
    /// A chain of two to four genes, each pointing at a uniformly drawn module species.
    pub fn new_random<R: Rng + ?Sized>(
        uid: GenomeId,
        rng: &mut R,
        ranges: &HyperparamRanges,
        counter: &InnovationCounter,
        module_species_ids: &[SpeciesId],
        num_classes: usize,
    ) -> Result<Self, GenomeError> {
        if module_species_ids.is_empty() {
            return Err(GenomeError::NoModuleSpecies);
        }
        let genes = rng.gen_range(2..=4);
        let mut nodes = BTreeMap::new();
        let mut edges = BTreeMap::new();
        let mut prev = INPUT_NODE;
        for _ in 0..genes {
            let id = counter.next_id();
            let species = module_species_ids[rng.gen_range(0..module_species_ids.len())];
            nodes.insert(
                id,
                BlueprintGene {
                    module_species: species,
                },
            );
            edges.insert(counter.next_id(), Edge { from: prev, to: id });
            prev = id;
        }
        edges.insert(
            counter.next_id(),
            Edge {
                from: prev,
                to: OUTPUT_NODE,
            },
        );
        let fc1_units = ranges.sample_fc_units(rng);
        let last_layer = LastLayerParams::glorot(fc1_units, num_classes, rng);
        Ok(Self {
            uid,
            nodes,
            edges,
            classifier: Classifier { fc1_units, num_classes },
            last_layer,
            fitness: 0.0,
            age: 0,
            species_id: None,
        })
    }

    pub fn validate(&self, ranges: &HyperparamRanges) -> Result<(), Vec<Violation>> {
        let mut v = self.structural_violations();
        let c = self.classifier;
        if !(ranges.fc_units[0]..=ranges.fc_units[1]).contains(&c.fc1_units) {
            v.push(Violation::Fc1OutOfRange { fc1_units: c.fc1_units });
        }
        let ll = &self.last_layer;
        if ll.rows != c.fc1_units || ll.cols != c.num_classes || !ll.is_consistent() {
            v.push(Violation::ClassifierWeightsMismatch {
                fc1_units: c.fc1_units,
                num_classes: c.num_classes,
                rows: ll.rows,
                cols: ll.cols,
            });
        }
        if !ll.all_finite() {
            v.push(Violation::NonFiniteWeights);
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    /// Genes whose species pointer is not in `species_ids`.
    pub fn dangling_pointers(&self, species_ids: &[SpeciesId]) -> Vec<Violation> {
        self.nodes
            .iter()
            .filter(|(_, g)| !species_ids.contains(&g.module_species))
            .map(|(&node, g)| Violation::DanglingSpeciesPointer {
                node,
                species: g.module_species,
            })
            .collect()
    }

    /// Blueprint genes in topological order.
    pub fn genes_in_order(&self) -> Vec<(InnovationId, &BlueprintGene)> {
        self.topological_order()
            .unwrap_or_default()
            .into_iter()
            .filter_map(|id| self.nodes.get(&id).map(|g| (id, g)))
            .collect()
    }
}
