//! Dual-population co-evolution: fitness evaluation with Lamarckian
//! write-back, offspring generation, and the generation loop.

mod offspring;
pub mod operators;

pub use offspring::{allocate_offspring, elite_count, generate_offspring, CROSSOVER_PROB, ELITE_FRACTION};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{assemble, ChosenModule, ModulePool};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::genome::{GenomeError, GenomeId, IndividualGenome, InnovationCounter, LastLayerParams, ModuleGenome};
use crate::speciation::{adjust_threshold, speciate, DistanceCoefficients, SpeciesSet};
use crate::tensor::AdamConfig;

use operators::{
    repair_pointers, sample_k_mix, structural_crossover, structural_mutate_individual, structural_mutate_module,
    weight_mutate, weighted_crossover_last_layer,
};

/// Bonus over the generation's mean fitness given to genomes never evaluated.
pub const UNEVALUATED_BONUS: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("num_network must be in [1, {population}], got {requested}")]
    NumNetwork { requested: usize, population: usize },
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error("module population has no species")]
    NoModuleSpecies,
}

/// Outcome of training and validating one candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub individual_id: GenomeId,
    /// Validation accuracy in `[0, 1]`.
    pub fitness: f64,
    pub chosen_module_ids: Vec<ChosenModule>,
    pub param_count: usize,
    pub wall_time_s: f64,
    /// Why the candidate scored zero without a full evaluation.
    pub failure: Option<String>,
}

/// Best candidate seen so far, with the modules it was assembled from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestGenome {
    pub individual: IndividualGenome,
    pub modules: Vec<ModuleGenome>,
    pub chosen_module_ids: Vec<ChosenModule>,
    pub fitness: f64,
    pub generation: usize,
    pub param_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub num_species_ind: usize,
    pub num_species_mod: usize,
    pub best_param_count: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunState {
    /// Generations completed.
    pub generation: usize,
    pub individuals: Vec<IndividualGenome>,
    pub modules: Vec<ModuleGenome>,
    pub individual_species: SpeciesSet<IndividualGenome>,
    pub module_species: SpeciesSet<ModuleGenome>,
    pub innovations: InnovationCounter,
    pub genome_ids: InnovationCounter,
    pub rng: ChaCha8Rng,
    pub best: Option<BestGenome>,
    pub history: Vec<GenerationStats>,
}

impl RunState {
    /// Random initial populations, speciated once.
    pub fn new(cfg: &RunConfig, num_classes: usize) -> Result<Self, EvolutionError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let innovations = InnovationCounter::new();
        let genome_ids = InnovationCounter::starting_at(0);
        let coeffs = DistanceCoefficients::default();
        let mut modules: Vec<ModuleGenome> = (0..cfg.pop_module)
            .map(|_| ModuleGenome::new_random(genome_ids.next_id(), &mut rng, &cfg.ranges, &innovations))
            .collect();
        let module_species = speciate(
            &mut modules,
            &SpeciesSet::new(cfg.species_threshold, cfg.target_species),
            &coeffs,
            &cfg.ranges,
        );
        let ids = module_species.ids();
        let mut individuals = (0..cfg.pop_individual)
            .map(|_| {
                IndividualGenome::new_random(
                    genome_ids.next_id(),
                    &mut rng,
                    &cfg.ranges,
                    &innovations,
                    &ids,
                    num_classes,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let individual_species = speciate(
            &mut individuals,
            &SpeciesSet::new(cfg.species_threshold, cfg.target_species),
            &coeffs,
            &cfg.ranges,
        );
        Ok(Self {
            generation: 0,
            individuals,
            modules,
            individual_species,
            module_species,
            innovations,
            genome_ids,
            rng,
            best: None,
            history: Vec::new(),
        })
    }

    pub fn best_fitness(&self) -> f64 {
        self.best.as_ref().map_or(0.0, |b| b.fitness)
    }
}

/// `splitmix64` finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the RNG stream that trains `uid` in `generation`.
pub fn worker_seed(master: u64, generation: usize, uid: GenomeId) -> u64 {
    mix(mix(mix(master) ^ generation as u64) ^ uid)
}

/// Seed of the stream used by the weight operators for the `child`-th
/// individual offspring of `generation`. Keeping these draws off the main
/// stream leaves structural search identical across ablation modes.
pub fn weight_seed(master: u64, generation: usize, child: u64) -> u64 {
    mix(mix(mix(master ^ 0x5745_4947_4854) ^ generation as u64) ^ child)
}

struct Trained {
    record: EvalRecord,
    last_layer: Option<LastLayerParams>,
}

fn train_candidate(
    ind: &IndividualGenome,
    pool: &ModulePool,
    cfg: &RunConfig,
    generation: usize,
    train: &Dataset,
    val: &Dataset,
) -> Trained {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(worker_seed(cfg.seed, generation, ind.uid));
    let shape = val.sample_shape();
    let failed = |reason: String, chosen: Vec<ChosenModule>, params: usize| Trained {
        record: EvalRecord {
            individual_id: ind.uid,
            fitness: 0.0,
            chosen_module_ids: chosen,
            param_count: params,
            wall_time_s: start.elapsed().as_secs_f64(),
            failure: Some(reason),
        },
        last_layer: None,
    };
    let assembled = match assemble(ind, pool, &shape, &cfg.ranges, AdamConfig::with_lr(cfg.lr), &mut rng) {
        Ok(a) => a,
        Err(e) => return failed(e.to_string(), Vec::new(), 0),
    };
    let mut net = assembled.network;
    let params = net.param_count();
    for _ in 0..cfg.k_epochs {
        if let Err(e) = net.train_epoch(train, cfg.batch_size, &mut rng) {
            return failed(e.to_string(), assembled.chosen, params);
        }
    }
    match net.accuracy(val, &mut rng) {
        Ok(acc) => Trained {
            record: EvalRecord {
                individual_id: ind.uid,
                fitness: acc,
                chosen_module_ids: assembled.chosen,
                param_count: params,
                wall_time_s: start.elapsed().as_secs_f64(),
                failure: None,
            },
            last_layer: Some(net.extract_last_layer()),
        },
        Err(e) => failed(e.to_string(), assembled.chosen, params),
    }
}

/// Trains `num_network` distinct individuals drawn without replacement and
/// assigns fitness to both populations.
///
/// Used modules receive the mean fitness of the candidates that used them;
/// genomes still at age 0 afterwards receive the evaluation mean plus 0.01.
/// Candidate failures score 0 and are reported in their record.
pub fn evaluate_fitness(
    state: &mut RunState,
    cfg: &RunConfig,
    num_network: usize,
    train: &Dataset,
    val: &Dataset,
) -> Result<Vec<EvalRecord>, EvolutionError> {
    if num_network == 0 || num_network > state.individuals.len() {
        return Err(EvolutionError::NumNetwork {
            requested: num_network,
            population: state.individuals.len(),
        });
    }
    let picked = sample(&mut state.rng, state.individuals.len(), num_network).into_vec();
    let pool = ModulePool::from_modules(&state.modules);
    let generation = state.generation;
    let run = |&i: &usize| train_candidate(&state.individuals[i], &pool, cfg, generation, train, val);
    let results: Vec<Trained> = if cfg.workers > 1 {
        let threads = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .expect("thread pool");
        threads.install(|| picked.par_iter().map(run).collect())
    } else {
        picked.iter().map(run).collect()
    };

    let mut uses: BTreeMap<GenomeId, Vec<f64>> = BTreeMap::new();
    let mut records = Vec::with_capacity(results.len());
    for (&i, t) in picked.iter().zip(results) {
        let ind = &mut state.individuals[i];
        ind.age += 1;
        ind.fitness = t.record.fitness;
        if cfg.ablation.lamarckian() {
            if let Some(ll) = t.last_layer {
                ind.last_layer = ll;
            }
        }
        let mut distinct: Vec<GenomeId> = t.record.chosen_module_ids.iter().map(|c| c.module).collect();
        distinct.sort_unstable();
        distinct.dedup();
        for m in distinct {
            uses.entry(m).or_default().push(t.record.fitness);
        }
        records.push(t.record);
    }
    for m in &mut state.modules {
        if let Some(f) = uses.get(&m.uid) {
            m.fitness = f.iter().sum::<f64>() / f.len() as f64;
            m.age += 1;
        }
    }
    let avg = records.iter().map(|r| r.fitness).sum::<f64>() / records.len() as f64;
    for ind in state.individuals.iter_mut().filter(|g| g.age == 0) {
        ind.fitness = avg + UNEVALUATED_BONUS;
    }
    for m in state.modules.iter_mut().filter(|g| g.age == 0) {
        m.fitness = avg + UNEVALUATED_BONUS;
    }

    if let Some(best) = records.iter().filter(|r| r.failure.is_none()).max_by(|a, b| {
        a.fitness
            .total_cmp(&b.fitness)
            .then(b.individual_id.cmp(&a.individual_id))
    }) {
        if state.best.as_ref().is_none_or(|b| best.fitness > b.fitness) {
            let individual = state
                .individuals
                .iter()
                .find(|g| g.uid == best.individual_id)
                .expect("evaluated individual")
                .clone();
            let modules = best
                .chosen_module_ids
                .iter()
                .map(|c| pool.find(c.module).expect("chosen module").clone())
                .collect();
            state.best = Some(BestGenome {
                individual,
                modules,
                chosen_module_ids: best.chosen_module_ids.clone(),
                fitness: best.fitness,
                generation,
                param_count: best.param_count,
            });
        }
    }
    Ok(records)
}

/// One full generation: evaluation, module reproduction and speciation, then
/// the same for individuals.
pub fn next_generation(
    state: &mut RunState,
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<Vec<EvalRecord>, EvolutionError> {
    let start = Instant::now();
    let records = evaluate_fitness(state, cfg, cfg.num_network, train, val)?;
    reproduce(state, cfg, &records, start)?;
    Ok(records)
}

/// Breeds and speciates both populations from evaluated parents, then logs
/// the generation.
pub fn reproduce(
    state: &mut RunState,
    cfg: &RunConfig,
    records: &[EvalRecord],
    start: Instant,
) -> Result<(), EvolutionError> {
    let coeffs = DistanceCoefficients::default();

    let mut rng = state.rng.clone();
    let ranges = cfg.ranges;
    let innovations = state.innovations.clone();
    let genome_ids = state.genome_ids.clone();

    let mut modules = generate_offspring(
        &state.modules,
        &state.module_species,
        &mut rng,
        &genome_ids,
        |p1, p2, rng| {
            let mut child = match p2 {
                Some(p2) => structural_crossover(p1, p2, rng),
                None => p1.clone(),
            };
            structural_mutate_module(&mut child, rng, &ranges, &innovations);
            child
        },
    );
    let mut module_set = state.module_species.clone();
    module_set.threshold = adjust_threshold(&module_set);
    let module_species = speciate(&mut modules, &module_set, &coeffs, &ranges);
    let species_ids = module_species.ids();
    if species_ids.is_empty() {
        return Err(EvolutionError::NoModuleSpecies);
    }

    let ablation = cfg.ablation;
    let symmetric = cfg.symmetric_perturbation;
    let (seed, generation) = (cfg.seed, state.generation);
    let mut child_index = 0u64;
    let mut individuals = generate_offspring(
        &state.individuals,
        &state.individual_species,
        &mut rng,
        &genome_ids,
        |p1, p2, rng| {
            let mut wrng = ChaCha8Rng::seed_from_u64(weight_seed(seed, generation, child_index));
            child_index += 1;
            let mut child = match p2 {
                Some(p2) => {
                    let mut child = structural_crossover(p1, p2, rng);
                    let (better, other) = if p2.fitness > p1.fitness { (p2, p1) } else { (p1, p2) };
                    child.classifier = better.classifier;
                    let k = sample_k_mix(&mut wrng);
                    child.last_layer = weighted_crossover_last_layer(&better.last_layer, &other.last_layer, k)
                        .unwrap_or_else(|_| better.last_layer.clone());
                    child
                }
                None => p1.clone(),
            };
            repair_pointers(&mut child, &species_ids, rng);
            structural_mutate_individual(&mut child, rng, &species_ids, &innovations);
            if ablation.weight_evolution() {
                weight_mutate(&mut child.last_layer, &mut wrng, symmetric);
            } else {
                child.last_layer =
                    LastLayerParams::glorot(child.classifier.fc1_units, child.classifier.num_classes, &mut wrng);
            }
            child
        },
    );
    for ind in &mut individuals {
        repair_pointers(ind, &species_ids, &mut rng);
    }
    let mut individual_set = state.individual_species.clone();
    individual_set.threshold = adjust_threshold(&individual_set);
    let individual_species = speciate(&mut individuals, &individual_set, &coeffs, &ranges);

    state.modules = modules;
    state.module_species = module_species;
    state.individuals = individuals;
    state.individual_species = individual_species;
    state.rng = rng;
    state.innovations = innovations;
    state.genome_ids = genome_ids;
    state.history.push(GenerationStats {
        generation: state.generation,
        best_fitness: state.best_fitness(),
        mean_fitness: records.iter().map(|r| r.fitness).sum::<f64>() / records.len() as f64,
        num_species_ind: state.individual_species.len(),
        num_species_mod: state.module_species.len(),
        best_param_count: state.best.as_ref().map_or(0, |b| b.param_count),
        wall_time_s: start.elapsed().as_secs_f64(),
    });
    state.generation += 1;
    Ok(())
}
