//! Compatibility-distance speciation with fitness sharing.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::genome::{Genome, GenomeId, HyperparamRanges, SpeciesId};

/// Weights of the two distance terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceCoefficients {
    pub structural: f64,
    pub hyperparam: f64,
}

impl Default for DistanceCoefficients {
    fn default() -> Self {
        Self {
            structural: 1.0,
            hyperparam: 0.5,
        }
    }
}

pub const THRESHOLD_MIN: f64 = 0.05;
pub const THRESHOLD_MAX: f64 = 10.0;

/// NEAT-style distance over node innovation ids.
///
/// `structural * (excess + disjoint) / max(|a|, |b|) + hyperparam * mean gene distance over matching ids`.
pub fn compatibility_distance<G: Genome>(
    a: &G,
    b: &G,
    coeffs: &DistanceCoefficients,
    ranges: &HyperparamRanges,
) -> f64 {
    let (na, nb) = (a.nodes(), b.nodes());
    let larger = na.len().max(nb.len());
    if larger == 0 {
        return 0.0;
    }
    let mut matching = 0usize;
    let mut hyper = 0.0;
    for (id, ga) in na {
        if let Some(gb) = nb.get(id) {
            matching += 1;
            hyper += G::gene_distance(ga, gb, ranges);
        }
    }
    let non_matching = na.len() + nb.len() - 2 * matching;
    let structural = non_matching as f64 / larger as f64;
    let hyper_mean = if matching == 0 { 0.0 } else { hyper / matching as f64 };
    coeffs.structural * structural + coeffs.hyperparam * hyper_mean
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Species<G> {
    pub id: SpeciesId,
    pub representative: G,
    pub members: Vec<GenomeId>,
    pub mean_adjusted_fitness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesSet<G> {
    pub species: Vec<Species<G>>,
    pub threshold: f64,
    pub target_count: usize,
    pub next_species_id: SpeciesId,
}

impl<G: Genome> SpeciesSet<G> {
    pub fn new(threshold: f64, target_count: usize) -> Self {
        Self {
            species: Vec::new(),
            threshold,
            target_count,
            next_species_id: 0,
        }
    }

    pub fn ids(&self) -> Vec<SpeciesId> {
        self.species.iter().map(|s| s.id).collect()
    }

    pub fn get(&self, id: SpeciesId) -> Option<&Species<G>> {
        self.species.iter().find(|s| s.id == id)
    }

    pub fn len(&self) -> usize {
        self.species.len()
    }

    pub fn is_empty(&self) -> bool {
        self.species.is_empty()
    }

    /// Recomputes each species' mean adjusted fitness (raw fitness / species size).
    pub fn refresh_fitness(&mut self, population: &[G]) {
        for s in &mut self.species {
            let size = s.members.len().max(1) as f64;
            let total: f64 = s
                .members
                .iter()
                .filter_map(|uid| population.iter().find(|g| g.uid() == *uid))
                .map(|g| g.fitness() / size)
                .sum();
            s.mean_adjusted_fitness = total / size;
        }
    }
}

/// Assigns every genome to the first species whose representative lies within
/// the threshold, founding new species as needed.
///
/// Surviving species keep their ids; each species' new representative is its
/// fittest member, so the next call compares against this generation.
pub fn speciate<G: Genome>(
    population: &mut [G],
    previous: &SpeciesSet<G>,
    coeffs: &DistanceCoefficients,
    ranges: &HyperparamRanges,
) -> SpeciesSet<G> {
    let mut set = SpeciesSet {
        species: previous
            .species
            .iter()
            .map(|s| Species {
                id: s.id,
                representative: s.representative.clone(),
                members: Vec::new(),
                mean_adjusted_fitness: 0.0,
            })
            .collect(),
        threshold: previous.threshold,
        target_count: previous.target_count,
        next_species_id: previous.next_species_id,
    };
    let mut member_index: Vec<Vec<usize>> = vec![Vec::new(); set.species.len()];
    for (i, genome) in population.iter().enumerate() {
        let found = set
            .species
            .iter()
            .position(|s| compatibility_distance(genome, &s.representative, coeffs, ranges) < set.threshold);
        match found {
            Some(k) => member_index[k].push(i),
            None => {
                set.species.push(Species {
                    id: set.next_species_id,
                    representative: genome.clone(),
                    members: Vec::new(),
                    mean_adjusted_fitness: 0.0,
                });
                set.next_species_id += 1;
                member_index.push(vec![i]);
            }
        }
    }
    let mut kept = Vec::with_capacity(set.species.len());
    for (mut species, members) in set.species.into_iter().zip(member_index) {
        if members.is_empty() {
            continue;
        }
        let best = members.iter().copied().fold(members[0], |b, i| {
            if population[i].fitness() > population[b].fitness() {
                i
            } else {
                b
            }
        });
        species.representative = population[best].clone();
        species.members = members.iter().map(|&i| population[i].uid()).collect();
        for &i in &members {
            population[i].set_species_id(Some(species.id));
        }
        kept.push(species);
    }
    set.species = kept;
    set.refresh_fitness(population);
    set
}

/// Nudges the threshold toward the target species count.
pub fn adjust_threshold<G>(set: &SpeciesSet<G>) -> f64 {
    let count = set.species.len();
    let t = if count > set.target_count {
        set.threshold * 1.1
    } else if count < set.target_count {
        set.threshold * 0.9
    } else {
        set.threshold
    };
    t.clamp(THRESHOLD_MIN, THRESHOLD_MAX)
}

/// True when every genome belongs to exactly one species.
pub fn is_partition<G: Genome>(set: &SpeciesSet<G>, population: &[G]) -> bool {
    let mut seen = BTreeSet::new();
    for s in &set.species {
        if s.members.is_empty() {
            return false;
        }
        for uid in &s.members {
            if !seen.insert(*uid) {
                return false;
            }
        }
    }
    seen.len() == population.len() && population.iter().all(|g| seen.contains(&g.uid()))
}
