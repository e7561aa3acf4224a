use rand::Rng;

use super::operators::{select_second_parent, tournament_select};
use crate::genome::{Genome, InnovationCounter};
use crate::speciation::SpeciesSet;

pub const ELITE_FRACTION: f64 = 0.2;
pub const CROSSOVER_PROB: f64 = 0.75;

/// Elites kept from a species of `size`: the top 20%, at least one.
pub fn elite_count(size: usize) -> usize {
    ((ELITE_FRACTION * size as f64).floor() as usize).max(1).min(size)
}

/// Splits `total` slots proportionally to `shares` by largest remainder.
/// Falls back to equal shares when all are zero.
pub fn allocate_offspring(shares: &[f64], total: usize) -> Vec<usize> {
    if shares.is_empty() {
        return Vec::new();
    }
    let sum: f64 = shares.iter().filter(|s| s.is_finite() && **s > 0.0).sum();
    let weights: Vec<f64> = if sum > 0.0 {
        shares
            .iter()
            .map(|&s| if s.is_finite() && s > 0.0 { s / sum } else { 0.0 })
            .collect()
    } else {
        vec![1.0 / shares.len() as f64; shares.len()]
    };
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Next population of the same size.
///
/// Each species keeps its elites unchanged and breeds children by
/// tournament selection. Children slots beyond the elites are shared out in
/// proportion to each species' mean fitness (the sum of its size-adjusted
/// fitness). With probability 0.75, and only in species of two or more,
/// `make_child` receives two distinct parents; otherwise one.
pub fn generate_offspring<G, R, F>(
    population: &[G],
    species: &SpeciesSet<G>,
    rng: &mut R,
    genome_ids: &InnovationCounter,
    mut make_child: F,
) -> Vec<G>
where
    G: Genome,
    R: Rng + ?Sized,
    F: FnMut(&G, Option<&G>, &mut R) -> G,
{
    let groups: Vec<Vec<&G>> = species
        .species
        .iter()
        .map(|s| {
            let mut members: Vec<&G> = s
                .members
                .iter()
                .filter_map(|uid| population.iter().find(|g| g.uid() == *uid))
                .collect();
            members.sort_by(|a, b| b.fitness().total_cmp(&a.fitness()).then(a.uid().cmp(&b.uid())));
            members
        })
        .filter(|m| !m.is_empty())
        .collect();
    let elites: Vec<usize> = groups.iter().map(|g| elite_count(g.len())).collect();
    let shares: Vec<f64> = groups
        .iter()
        .map(|g| g.iter().map(|m| m.fitness()).sum::<f64>() / g.len() as f64)
        .collect();
    let children = allocate_offspring(&shares, population.len().saturating_sub(elites.iter().sum()));

    let mut next = Vec::with_capacity(population.len());
    for ((members, &e), &c) in groups.iter().zip(&elites).zip(&children) {
        next.extend(members[..e].iter().map(|&g| g.clone()));
        for _ in 0..c {
            let first = tournament_select(members, rng);
            let cross = rng.gen_bool(CROSSOVER_PROB) && members.len() >= 2;
            let mut child = if cross {
                let second = select_second_parent(members, first, rng);
                make_child(members[first], Some(members[second]), rng)
            } else {
                make_child(members[first], None, rng)
            };
            child.set_uid(genome_ids.next_id());
            child.set_fitness(0.0);
            child.set_age(0);
            child.set_species_id(None);
            next.push(child);
        }
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{HyperparamRanges, ModuleGenome};
    use crate::speciation::{speciate, DistanceCoefficients};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn elite_counts() {
        assert_eq!(elite_count(10), 2);
        assert_eq!(elite_count(1), 1);
        assert_eq!(elite_count(4), 1);
        assert_eq!(elite_count(15), 3);
    }

    #[test]
    fn allocation_sums_to_total() {
        assert_eq!(allocate_offspring(&[1.0, 1.0, 2.0], 8), vec![2, 2, 4]);
        assert_eq!(allocate_offspring(&[0.0, 0.0], 5), vec![3, 2]);
        assert_eq!(allocate_offspring(&[0.5, 0.25, 0.25], 3), vec![1, 1, 1]);
        assert_eq!(allocate_offspring(&[0.6, 0.3, 0.1], 3), vec![2, 1, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let n = rng.gen_range(1..8);
            let shares: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total = rng.gen_range(0..40);
            assert_eq!(allocate_offspring(&shares, total).iter().sum::<usize>(), total);
        }
    }

    fn population(n: u64, rng: &mut ChaCha8Rng) -> (Vec<ModuleGenome>, SpeciesSet<ModuleGenome>) {
        let ranges = HyperparamRanges::default();
        let counter = InnovationCounter::new();
        let mut pop: Vec<ModuleGenome> = (0..n)
            .map(|i| {
                let mut m = ModuleGenome::new_random(i, rng, &ranges, &counter);
                m.fitness = rng.gen();
                m
            })
            .collect();
        let set = speciate(
            &mut pop,
            &SpeciesSet::new(3.0, 4),
            &DistanceCoefficients::default(),
            &ranges,
        );
        (pop, set)
    }

    #[test]
    fn species_of_ten_keeps_two_elites_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pop, set) = population(10, &mut rng);
        assert_eq!(set.len(), 1);
        let ids = InnovationCounter::starting_at(100);
        let next = generate_offspring(&pop, &set, &mut rng, &ids, |p, _, _| p.clone());
        assert_eq!(next.len(), 10);
        let mut ranked = pop.clone();
        ranked.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
        assert_eq!(next[..2], ranked[..2]);
        assert!(next[2..].iter().all(|c| c.uid >= 100 && c.fitness == 0.0 && c.age == 0));
    }

    #[test]
    fn crossover_branch_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (pop, set) = population(10, &mut rng);
        let ids = InnovationCounter::starting_at(100);
        let (mut two, mut total) = (0usize, 0usize);
        while total < 10_000 {
            generate_offspring(&pop, &set, &mut rng, &ids, |p, q, _| {
                total += 1;
                if let Some(q) = q {
                    assert_ne!(p.uid, q.uid);
                    two += 1;
                }
                p.clone()
            });
        }
        let rate = two as f64 / total as f64;
        assert!((rate - 0.75).abs() < 0.02, "{rate}");
    }

    #[test]
    fn population_size_is_preserved_across_species() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ranges = HyperparamRanges::default();
        let (mut pop, _) = population(30, &mut rng);
        let ids = InnovationCounter::starting_at(1000);
        for threshold in [0.1, 1.0, 2.5] {
            let set = speciate(
                &mut pop,
                &SpeciesSet::new(threshold, 4),
                &DistanceCoefficients::default(),
                &ranges,
            );
            let next = generate_offspring(&pop, &set, &mut rng, &ids, |p, _, _| p.clone());
            assert_eq!(next.len(), 30, "threshold {threshold}");
        }
    }
}
