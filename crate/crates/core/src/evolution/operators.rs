//! Selection, structural variation and last-layer weighting operators.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;

use crate::genome::{
    BlueprintGene, Edge, Genome, GenomeGraph, HyperparamRanges, IndividualGenome, InnovationCounter, InnovationId,
    LastLayerParams, LayerGene, ModuleGenome, SpeciesId, INPUT_NODE,
};

/// Probability of add-node (module) or add-gene (individual) in a structural mutation.
pub const ADD_STRUCTURE_PROB: f64 = 0.5;
pub const CONV_PROB: f64 = 0.6;
pub const POOL_PROB: f64 = 0.2;
pub const WEIGHT_MUTATION_PROB: f64 = 0.5;
pub const WEIGHT_MUTATION_FRACTION: f64 = 0.15;
pub const WEIGHT_MUTATION_SCALE: f64 = 0.01;
/// Redraws of the second parent before falling back to a uniform pick.
pub const PARENT_REDRAWS: usize = 16;

/// Size-2 tournament over `members`; returns the winner's index.
///
/// The two contestants are distinct whenever there are at least two members;
/// equal fitness is decided by a coin flip.
pub fn tournament_select<G: Genome, R: Rng + ?Sized>(members: &[&G], rng: &mut R) -> usize {
    assert!(!members.is_empty(), "tournament over an empty species");
    if members.len() == 1 {
        return 0;
    }
    let a = rng.gen_range(0..members.len());
    let mut b = rng.gen_range(0..members.len() - 1);
    if b >= a {
        b += 1;
    }
    let (fa, fb) = (members[a].fitness(), members[b].fitness());
    if fa > fb {
        a
    } else if fb > fa {
        b
    } else if rng.gen_bool(0.5) {
        a
    } else {
        b
    }
}

/// Second parent: repeated tournaments until the winner differs from `first`.
pub fn select_second_parent<G: Genome, R: Rng + ?Sized>(members: &[&G], first: usize, rng: &mut R) -> usize {
    if members.len() < 2 {
        return first;
    }
    for _ in 0..PARENT_REDRAWS {
        let p = tournament_select(members, rng);
        if p != first {
            return p;
        }
    }
    let mut p = rng.gen_range(0..members.len() - 1);
    if p >= first {
        p += 1;
    }
    p
}

/// NEAT-style crossover of the graph part. The child takes the fitter
/// parent's topology (ties: `p1`); genes present in both parents take their
/// payload from either parent with equal probability.
pub fn structural_crossover<G: Genome, R: Rng + ?Sized>(p1: &G, p2: &G, rng: &mut R) -> G {
    let (fitter, other) = if p2.fitness() > p1.fitness() {
        (p2, p1)
    } else {
        (p1, p2)
    };
    let mut child = fitter.clone();
    for (id, gene) in child.nodes_mut().iter_mut() {
        if let Some(alt) = other.nodes().get(id) {
            if rng.gen_bool(0.5) {
                *gene = alt.clone();
            }
        }
    }
    child
}

fn random_layer<R: Rng + ?Sized>(rng: &mut R, ranges: &HyperparamRanges) -> LayerGene {
    let u: f64 = rng.gen();
    if u < CONV_PROB {
        LayerGene::random_conv(rng, ranges)
    } else if u < CONV_PROB + POOL_PROB {
        LayerGene::MaxPool2d
    } else {
        LayerGene::Dropout {
            rate: ranges.sample_dropout(rng),
        }
    }
}

/// Splits a uniformly chosen edge with a new gene.
fn split_edge<G: GenomeGraph, R: Rng + ?Sized>(
    g: &mut G,
    gene: G::Gene,
    rng: &mut R,
    counter: &InnovationCounter,
) -> InnovationId {
    let edge_ids: Vec<InnovationId> = g.edges().keys().copied().collect();
    let victim = edge_ids[rng.gen_range(0..edge_ids.len())];
    let Edge { from, to } = g.edges_mut().remove(&victim).expect("edge exists");
    let node = counter.next_id();
    g.nodes_mut().insert(node, gene);
    g.edges_mut().insert(counter.next_id(), Edge { from, to: node });
    g.edges_mut().insert(counter.next_id(), Edge { from: node, to });
    node
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModuleMutation {
    AddNode(InnovationId),
    Hyperparameter(InnovationId),
}

/// Either inserts a layer on a random edge or re-samples one hyperparameter
/// of a random layer, each with probability 1/2. Genomes without tunable
/// layers always receive a new node.
pub fn structural_mutate_module<R: Rng + ?Sized>(
    m: &mut ModuleGenome,
    rng: &mut R,
    ranges: &HyperparamRanges,
    counter: &InnovationCounter,
) -> ModuleMutation {
    let tunable: Vec<InnovationId> = m
        .nodes
        .iter()
        .filter(|(_, g)| g.has_hyperparams())
        .map(|(&id, _)| id)
        .collect();
    if rng.gen_bool(ADD_STRUCTURE_PROB) || tunable.is_empty() {
        let gene = random_layer(rng, ranges);
        return ModuleMutation::AddNode(split_edge(m, gene, rng, counter));
    }
    let id = tunable[rng.gen_range(0..tunable.len())];
    let gene = m.nodes.get_mut(&id).expect("tunable node");
    match gene {
        LayerGene::Conv2d { kernel_size, filters } => {
            if rng.gen_bool(0.5) {
                *kernel_size = ranges.sample_kernel(rng);
            } else {
                *filters = ranges.sample_filters(rng);
            }
        }
        LayerGene::Dropout { rate } => *rate = ranges.sample_dropout(rng),
        LayerGene::MaxPool2d => unreachable!("pooling has no hyperparameters"),
    }
    ModuleMutation::Hyperparameter(id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndividualMutation {
    AddGene(InnovationId),
    Reassign(InnovationId),
}

fn descendants<G: GenomeGraph>(g: &G, start: InnovationId) -> BTreeSet<InnovationId> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![start];
    while let Some(n) = stack.pop() {
        for m in g.successors(n) {
            if seen.insert(m) {
                stack.push(m);
            }
        }
    }
    seen
}

/// Either adds a gene on a new path from a random node to one of its
/// descendants (the junction becomes a concat at assembly), or re-points a
/// random gene at a random species, each with probability 1/2.
pub fn structural_mutate_individual<R: Rng + ?Sized>(
    ind: &mut IndividualGenome,
    rng: &mut R,
    species_ids: &[SpeciesId],
    counter: &InnovationCounter,
) -> IndividualMutation {
    assert!(!species_ids.is_empty(), "no module species to point at");
    let pick = |rng: &mut R| species_ids[rng.gen_range(0..species_ids.len())];
    if rng.gen_bool(ADD_STRUCTURE_PROB) || ind.nodes.is_empty() {
        let mut starts = vec![INPUT_NODE];
        starts.extend(ind.nodes.keys().copied());
        let from = starts[rng.gen_range(0..starts.len())];
        let ends: Vec<InnovationId> = descendants(ind, from).into_iter().collect();
        let to = ends[rng.gen_range(0..ends.len())];
        let node = counter.next_id();
        ind.nodes.insert(
            node,
            BlueprintGene {
                module_species: pick(rng),
            },
        );
        ind.edges.insert(counter.next_id(), Edge { from, to: node });
        ind.edges.insert(counter.next_id(), Edge { from: node, to });
        return IndividualMutation::AddGene(node);
    }
    let ids: Vec<InnovationId> = ind.nodes.keys().copied().collect();
    let id = ids[rng.gen_range(0..ids.len())];
    ind.nodes.get_mut(&id).expect("gene").module_species = pick(rng);
    IndividualMutation::Reassign(id)
}

/// Points every gene whose species disappeared at a uniformly drawn surviving species.
pub fn repair_pointers<R: Rng + ?Sized>(ind: &mut IndividualGenome, species_ids: &[SpeciesId], rng: &mut R) -> usize {
    let mut repaired = 0;
    for gene in ind.nodes.values_mut() {
        if !species_ids.contains(&gene.module_species) {
            gene.module_species = species_ids[rng.gen_range(0..species_ids.len())];
            repaired += 1;
        }
    }
    repaired
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("last layers differ in shape: {0}x{1} vs {2}x{3}")]
pub struct ShapeMismatch(pub usize, pub usize, pub usize, pub usize);

/// `k * better + (1 - k) * other`, elementwise over weights and biases.
pub fn weighted_crossover_last_layer(
    better: &LastLayerParams,
    other: &LastLayerParams,
    k_mix: f64,
) -> Result<LastLayerParams, ShapeMismatch> {
    if !better.same_shape(other) || !better.is_consistent() || !other.is_consistent() {
        return Err(ShapeMismatch(better.rows, better.cols, other.rows, other.cols));
    }
    let mix = |a: &[f32], b: &[f32]| -> Vec<f32> {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (k_mix * f64::from(x) + (1.0 - k_mix) * f64::from(y)) as f32)
            .collect()
    };
    Ok(LastLayerParams {
        rows: better.rows,
        cols: better.cols,
        weights: mix(&better.weights, &other.weights),
        biases: mix(&better.biases, &other.biases),
    })
}

/// Mixing coefficient drawn uniformly from the open interval (2/3, 1).
pub fn sample_k_mix<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let k = rng.gen_range(2.0 / 3.0..1.0);
        if k > 2.0 / 3.0 {
            return k;
        }
    }
}

/// With probability 1/2, perturbs `floor(0.15 N)` distinct weights (biases
/// untouched) by `0.01 u`, `u ~ U(0, 1)`, or `±0.01 u` when `symmetric`.
///
/// `u` is redrawn until the stored `f32` actually moves by a nonzero amount
/// below 0.01. Returns the perturbed positions; empty when skipped.
pub fn weight_mutate<R: Rng + ?Sized>(params: &mut LastLayerParams, rng: &mut R, symmetric: bool) -> Vec<usize> {
    if rng.gen::<f64>() >= WEIGHT_MUTATION_PROB {
        return Vec::new();
    }
    let n = params.weights.len();
    let count = (WEIGHT_MUTATION_FRACTION * n as f64).floor() as usize;
    let mut positions = sample(rng, n, count).into_vec();
    positions.sort_unstable();
    for &i in &positions {
        let w = params.weights[i];
        let sign = if symmetric && rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        loop {
            let u: f64 = rng.gen();
            let moved = (f64::from(w) + sign * WEIGHT_MUTATION_SCALE * u) as f32;
            let delta = (f64::from(moved) - f64::from(w)).abs();
            if delta > 0.0 && delta < WEIGHT_MUTATION_SCALE {
                params.weights[i] = moved;
                break;
            }
        }
    }
    positions
}
