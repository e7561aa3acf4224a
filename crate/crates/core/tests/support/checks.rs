//! Property checks shared by the invariant tests and the acceptance run.
//! Each returns a one-line summary on success and the first violation
//! otherwise.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use lcodeepneat::assembly::{assemble, AssemblyError, ModulePool, Provenance};
use lcodeepneat::config::{DatasetSpec, RunConfig};
use lcodeepneat::dataset::Dataset;
use lcodeepneat::evolution::operators::{
    sample_k_mix, structural_crossover, structural_mutate_individual, structural_mutate_module, weight_mutate,
    weighted_crossover_last_layer,
};
use lcodeepneat::evolution::{evaluate_fitness, next_generation, RunState, UNEVALUATED_BONUS};
use lcodeepneat::genome::{
    Edge, GenomeGraph, HyperparamRanges, IndividualGenome, InnovationCounter, LastLayerParams, ModuleGenome,
};
use lcodeepneat::runner::{checkpoint_resume, run_evolve, Data, BEST_GENOME_FILE, CHECKPOINT_FILE, CSV_FILE};
use lcodeepneat::speciation::{is_partition, speciate, DistanceCoefficients, SpeciesSet};
use lcodeepneat::tensor::{Activation, AdamConfig, LayerSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        // negated so that NaN fails the check
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub fn small_ranges() -> HyperparamRanges {
    HyperparamRanges {
        conv_filters: [2, 6],
        fc_units: [4, 16],
        ..HyperparamRanges::default()
    }
}

/// 8x8 images, label 1 when the left half is brighter.
pub fn toy(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..2usize);
        for _ in 0..8 {
            for x in 0..8 {
                let bright = (x < 4) == (label == 1);
                pixels.push(if bright {
                    rng.gen_range(0.5..1.0)
                } else {
                    rng.gen_range(0.0..0.5)
                });
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, 8, 8, 1], pixels).unwrap(), labels, 2).unwrap()
}

pub fn toy_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        pop_individual: 6,
        pop_module: 8,
        num_network: 4,
        batch_size: 32,
        ranges: small_ranges(),
        ..RunConfig::default()
    }
}

fn module_pool(
    n: u64,
    species: u64,
    rng: &mut ChaCha8Rng,
    ranges: &HyperparamRanges,
    ids: &InnovationCounter,
) -> Vec<ModuleGenome> {
    (0..n)
        .map(|uid| {
            let mut m = ModuleGenome::new_random(uid, rng, ranges, ids);
            for _ in 0..rng.gen_range(0..3) {
                structural_mutate_module(&mut m, rng, ranges, ids);
            }
            m.species_id = Some(uid % species);
            m
        })
        .collect()
}

/// Every assembled network ends in flatten, a ReLU hidden dense layer and a
/// linear output dense layer, and has no other dense layer.
pub fn two_fc_terminal(assemblies: usize, seed: u64) -> Check {
    let ranges = small_ranges();
    let ids = InnovationCounter::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut built, mut depth_rejects) = (0, 0);
    while built < assemblies {
        let modules = module_pool(6, 3, &mut rng, &ranges, &ids);
        let pool = ModulePool::from_modules(&modules);
        let classes = rng.gen_range(2..11);
        let mut ind = IndividualGenome::new_random(1000, &mut rng, &ranges, &ids, &pool.species_ids(), classes)
            .map_err(|e| e.to_string())?;
        for _ in 0..rng.gen_range(0..4) {
            structural_mutate_individual(&mut ind, &mut rng, &pool.species_ids(), &ids);
        }
        let net = match assemble(&ind, &pool, &[8, 8, 1], &ranges, AdamConfig::default(), &mut rng) {
            Ok(a) => a.network,
            Err(AssemblyError::Depth { .. }) => {
                depth_rejects += 1;
                continue;
            }
            Err(e) => return Err(e.to_string()),
        };
        built += 1;
        let n = net.layers.len();
        ensure!(n >= 3, "network with {n} layers");
        let dense: Vec<usize> = (0..n)
            .filter(|&i| matches!(net.layers[i].spec, LayerSpec::Dense { .. }))
            .collect();
        ensure!(dense == [n - 2, n - 1], "dense layers at {dense:?} of {n}");
        ensure!(
            matches!(net.layers[n - 3].spec, LayerSpec::Flatten),
            "layer before the classifier is {}",
            net.layers[n - 3].spec.describe()
        );
        ensure!(
            net.layers[n - 2].spec
                == LayerSpec::Dense {
                    units: ind.classifier.fc1_units,
                    activation: Activation::Relu
                },
            "hidden layer {}",
            net.layers[n - 2].spec.describe()
        );
        ensure!(
            net.layers[n - 1].spec
                == LayerSpec::Dense {
                    units: classes,
                    activation: Activation::Linear
                },
            "output layer {}",
            net.layers[n - 1].spec.describe()
        );
        ensure!(
            net.layers
                .iter()
                .filter(|l| matches!(l.spec, LayerSpec::Flatten))
                .count()
                == 1,
            "more than one flatten"
        );
        ensure!(
            net.layers[n - 3..]
                .iter()
                .all(|l| matches!(l.provenance, Provenance::Flatten | Provenance::Classifier)),
            "classifier provenance"
        );
    }
    Ok(format!(
        "{built} assemblies ({depth_rejects} depth rejections resampled)"
    ))
}

/// Applies random structural operators to both populations and checks that
/// ids stay unique: no id names both a node and an edge, an edge id always
/// denotes the same connection, and all ids come from the counter.
pub fn innovation_uniqueness(applications: usize, seed: u64) -> Check {
    let ranges = small_ranges();
    let ids = InnovationCounter::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modules = module_pool(12, 3, &mut rng, &ranges, &ids);
    let species: Vec<u64> = vec![0, 1, 2];
    let mut individuals: Vec<IndividualGenome> = (0..10)
        .map(|uid| IndividualGenome::new_random(100 + uid, &mut rng, &ranges, &ids, &species, 2).unwrap())
        .collect();
    for m in modules.iter_mut() {
        m.fitness = rng.gen();
    }
    for _ in 0..applications {
        match rng.gen_range(0..4) {
            0 => {
                let i = rng.gen_range(0..modules.len());
                structural_mutate_module(&mut modules[i], &mut rng, &ranges, &ids);
            }
            1 => {
                let i = rng.gen_range(0..individuals.len());
                structural_mutate_individual(&mut individuals[i], &mut rng, &species, &ids);
            }
            2 => {
                let (a, b) = (rng.gen_range(0..modules.len()), rng.gen_range(0..modules.len()));
                let child = structural_crossover(&modules[a], &modules[b], &mut rng);
                let slot = rng.gen_range(0..modules.len());
                modules[slot] = child;
            }
            _ => {
                let (a, b) = (rng.gen_range(0..individuals.len()), rng.gen_range(0..individuals.len()));
                let child = structural_crossover(&individuals[a], &individuals[b], &mut rng);
                let slot = rng.gen_range(0..individuals.len());
                individuals[slot] = child;
            }
        }
    }
    let next = ids.peek();
    let mut node_ids = BTreeMap::new();
    let mut edge_ids: BTreeMap<u64, Edge> = BTreeMap::new();
    let mut record = |nodes: Vec<u64>, edges: Vec<(u64, Edge)>, kind: &'static str| -> Result<(), String> {
        for id in nodes {
            ensure!((2..next).contains(&id), "{kind} node id {id} outside [2, {next})");
            if let Some(other) = node_ids.insert(id, kind) {
                ensure!(other == kind, "node id {id} used by both populations");
            }
        }
        for (id, e) in edges {
            ensure!((2..next).contains(&id), "edge id {id} outside [2, {next})");
            if let Some(prev) = edge_ids.insert(id, e) {
                ensure!(prev == e, "edge id {id} denotes {prev:?} and {e:?}");
            }
        }
        Ok(())
    };
    for m in &modules {
        ensure!(m.validate(&ranges).is_ok(), "invalid module {}", m.uid);
        record(
            m.nodes().keys().copied().collect(),
            m.edges().iter().map(|(k, v)| (*k, *v)).collect(),
            "module",
        )?;
    }
    for g in &individuals {
        ensure!(g.validate(&ranges).is_ok(), "invalid individual {}", g.uid);
        record(
            g.nodes().keys().copied().collect(),
            g.edges().iter().map(|(k, v)| (*k, *v)).collect(),
            "individual",
        )?;
    }
    let shared: Vec<_> = node_ids.keys().filter(|id| edge_ids.contains_key(id)).collect();
    ensure!(shared.is_empty(), "ids used as both node and edge: {shared:?}");
    Ok(format!(
        "{applications} operator applications, {} node ids and {} edge ids distinct",
        node_ids.len(),
        edge_ids.len()
    ))
}

/// Speciation assigns every genome to exactly one species, for a sweep of
/// thresholds and population shapes.
pub fn speciation_partition(rounds: usize, seed: u64) -> Check {
    let ranges = small_ranges();
    let ids = InnovationCounter::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs = DistanceCoefficients::default();
    let mut species_seen = 0;
    for _ in 0..rounds {
        let n = rng.gen_range(1..30);
        let mut pop = module_pool(n, 1, &mut rng, &ranges, &ids);
        for m in pop.iter_mut() {
            m.fitness = rng.gen();
            m.species_id = None;
        }
        let previous = SpeciesSet::new(rng.gen_range(0.05..3.0), 4);
        let set = speciate(&mut pop, &previous, &coeffs, &ranges);
        ensure!(is_partition(&set, &pop), "not a partition of {n} genomes");
        for s in &set.species {
            for uid in &s.members {
                let g = pop.iter().find(|g| g.uid == *uid).unwrap();
                ensure!(
                    g.species_id == Some(s.id),
                    "genome {uid} labelled {:?}, listed in {}",
                    g.species_id,
                    s.id
                );
            }
        }
        // the next round reuses surviving species
        let again = speciate(&mut pop, &set, &coeffs, &ranges);
        ensure!(is_partition(&again, &pop), "re-speciation is not a partition");
        species_seen += set.len();
    }
    Ok(format!("{rounds} populations, {species_seen} species"))
}

/// The best fitness recorded so far never decreases.
pub fn elitism_monotonic(seeds: u64, generations: usize) -> Check {
    let (train, val) = (toy(96, 0), toy(48, 1));
    for seed in 0..seeds {
        let cfg = toy_config(seed);
        let mut state = RunState::new(&cfg, 2).map_err(|e| e.to_string())?;
        let mut best = 0.0;
        for t in 0..generations {
            let records = next_generation(&mut state, &cfg, &train, &val).map_err(|e| e.to_string())?;
            let gen_best = records
                .iter()
                .filter(|r| r.failure.is_none())
                .map(|r| r.fitness)
                .fold(0.0, f64::max);
            let now = state.best_fitness();
            ensure!(
                now >= best,
                "seed {seed} generation {t}: best fell from {best} to {now}"
            );
            ensure!(
                now >= gen_best,
                "seed {seed} generation {t}: best {now} below this generation's {gen_best}"
            );
            best = now;
        }
        let h: Vec<f64> = state.history.iter().map(|h| h.best_fitness).collect();
        ensure!(
            h.windows(2).all(|w| w[0] <= w[1]),
            "seed {seed}: logged best not monotone {h:?}"
        );
    }
    Ok(format!("{seeds} seeds x {generations} generations"))
}

/// Sampling and perturbation statistics of the last-layer operators.
pub fn weight_operator_distributions(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = 100_000;
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    for _ in 0..draws {
        let k = sample_k_mix(&mut rng);
        ensure!(k > 2.0 / 3.0 && k < 1.0, "k_mix {k} outside (2/3, 1)");
        lo = lo.min(k);
        hi = hi.max(k);
    }

    // convex combination recomputed element by element
    for _ in 0..20 {
        let (r, c) = (rng.gen_range(1..20), rng.gen_range(1..6));
        let a = LastLayerParams::glorot(r, c, &mut rng);
        let b = LastLayerParams::glorot(r, c, &mut rng);
        let k = sample_k_mix(&mut rng);
        let child = weighted_crossover_last_layer(&a, &b, k).map_err(|e| e.to_string())?;
        for (i, (&x, &y)) in a
            .weights
            .iter()
            .chain(&a.biases)
            .zip(b.weights.iter().chain(&b.biases))
            .enumerate()
        {
            let expect = k * f64::from(x) + (1.0 - k) * f64::from(y);
            let got = child.weights.iter().chain(&child.biases).nth(i).copied().unwrap();
            ensure!(
                (f64::from(got) - expect).abs() <= 1e-6,
                "mixed entry {i}: {got} vs {expect}"
            );
        }
    }

    let trials = 4000;
    let mut applied = 0;
    for t in 0..trials {
        let (rows, cols) = if t == 0 {
            (100, 10)
        } else {
            (rng.gen_range(1..60), rng.gen_range(1..12))
        };
        let before = LastLayerParams::glorot(rows, cols, &mut rng);
        let mut after = before.clone();
        let positions = weight_mutate(&mut after, &mut rng, false);
        let n = before.weights.len();
        let changed: Vec<usize> = (0..n).filter(|&i| before.weights[i] != after.weights[i]).collect();
        ensure!(before.biases == after.biases, "biases perturbed");
        if positions.is_empty() {
            ensure!(changed.is_empty(), "weights changed on the skip branch");
            continue;
        }
        applied += 1;
        let expect = (0.15 * n as f64).floor() as usize;
        ensure!(
            positions.len() == expect,
            "{} positions for N={n}, expected {expect}",
            positions.len()
        );
        ensure!(changed == positions, "changed entries differ from reported positions");
        for &i in &changed {
            let d = f64::from(after.weights[i]) - f64::from(before.weights[i]);
            // one float32 ulp of slack around the open interval
            let ulp = f64::from(before.weights[i].abs().max(1e-3)) * f64::from(f32::EPSILON);
            ensure!(d > 0.0 && d < 0.01 + ulp, "perturbation {d} outside (0, 0.01)");
        }
    }
    let rate = applied as f64 / trials as f64;
    ensure!((rate - 0.5).abs() < 0.03, "weight mutation applied at rate {rate}");
    Ok(format!(
        "k_mix in [{lo:.5}, {hi:.5}] over {draws} draws; mutation rate {rate:.3}; floor(0.15N) entries, deltas in (0, 0.01)"
    ))
}

/// Module fitness equals the mean accuracy of the candidates that used it.
pub fn attribution_oracle(seed: u64) -> Check {
    let cfg = toy_config(seed);
    let (train, val) = (toy(256, 0), toy(96, 1));
    let mut state = RunState::new(&cfg, 2).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for _ in 0..3 {
        let records = evaluate_fitness(&mut state, &cfg, cfg.num_network, &train, &val).map_err(|e| e.to_string())?;
        let avg = records.iter().map(|r| r.fitness).sum::<f64>() / records.len() as f64;
        for m in &state.modules {
            let users: Vec<f64> = records
                .iter()
                .filter(|r| r.chosen_module_ids.iter().any(|c| c.module == m.uid))
                .map(|r| r.fitness)
                .collect();
            if !users.is_empty() {
                let mean = users.iter().sum::<f64>() / users.len() as f64;
                ensure!(
                    m.fitness == mean,
                    "module {} has {} but its users average {mean}",
                    m.uid,
                    m.fitness
                );
                checked += 1;
            } else if m.age == 0 {
                ensure!(
                    m.fitness == avg + UNEVALUATED_BONUS,
                    "unevaluated module {} has {}",
                    m.uid,
                    m.fitness
                );
            }
        }
        next_generation(&mut state, &cfg, &train, &val).map_err(|e| e.to_string())?;
    }
    Ok(format!("{checked} module attributions matched"))
}

/// The output layer of an assembled network holds exactly the genome's
/// last-layer parameters.
pub fn inject_extract_roundtrip(cases: usize, seed: u64) -> Check {
    let ranges = small_ranges();
    let ids = InnovationCounter::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    while done < cases {
        let modules = module_pool(4, 2, &mut rng, &ranges, &ids);
        let pool = ModulePool::from_modules(&modules);
        let len = rng.gen_range(2..6);
        let mut ind = IndividualGenome::new_random(7, &mut rng, &ranges, &ids, &pool.species_ids(), len)
            .map_err(|e| e.to_string())?;
        // values with awkward bit patterns
        for w in ind
            .last_layer
            .weights
            .iter_mut()
            .chain(ind.last_layer.biases.iter_mut())
        {
            *w = f32::from_bits(rng.gen_range(0x3000_0000..0x4100_0000)) * if rng.gen() { -1.0 } else { 1.0 };
        }
        let Ok(a) = assemble(&ind, &pool, &[8, 8, 1], &ranges, AdamConfig::default(), &mut rng) else {
            continue;
        };
        let back = a.network.extract_last_layer();
        let bits = |p: &LastLayerParams| {
            p.weights
                .iter()
                .chain(&p.biases)
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        ensure!(bits(&back) == bits(&ind.last_layer), "roundtrip changed parameters");
        ensure!(
            (back.rows, back.cols) == (ind.last_layer.rows, ind.last_layer.cols),
            "roundtrip changed shape"
        );
        done += 1;
    }
    Ok(format!("{cases} networks, bit-exact"))
}

fn tiny_run_config(dir: &Path, seed: u64, generations: usize) -> RunConfig {
    RunConfig {
        dataset: DatasetSpec::Rectangles {
            train_size: 60,
            test_size: 20,
        },
        seed,
        generations,
        pop_individual: 4,
        pop_module: 5,
        num_network: 2,
        batch_size: 32,
        ranges: small_ranges(),
        output_dir: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

/// A run split by a checkpoint writes the same log and best genome as an
/// uninterrupted one.
pub fn resume_equivalence(seed: u64) -> Check {
    let whole = tempfile::tempdir().map_err(|e| e.to_string())?;
    let split = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tiny_run_config(whole.path(), seed, 6);
    let data = Data::load(&cfg, Path::new(".")).map_err(|e| e.to_string())?;
    run_evolve(&cfg, &data, None, &mut |_, _| {}).map_err(|e| e.to_string())?;

    let first = tiny_run_config(split.path(), seed, 3);
    run_evolve(&first, &data, None, &mut |_, _| {}).map_err(|e| e.to_string())?;
    let rest = tiny_run_config(split.path(), seed, 6);
    let state = checkpoint_resume(&split.path().join(CHECKPOINT_FILE), &rest).map_err(|e| e.to_string())?;
    ensure!(state.generation == 3, "checkpoint at generation {}", state.generation);
    run_evolve(&rest, &data, Some(state), &mut |_, _| {}).map_err(|e| e.to_string())?;
    for f in [CSV_FILE, BEST_GENOME_FILE] {
        let a = std::fs::read(whole.path().join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(split.path().join(f)).map_err(|e| e.to_string())?;
        ensure!(a == b, "{f} differs after resuming at generation 3");
    }
    Ok("6 generations vs 3 + resume + 3: identical CSV and best genome".into())
}

/// Two single-worker runs of the same config write identical files.
pub fn byte_identical_runs(seed: u64, generations: usize) -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    for dir in [a.path(), b.path()] {
        let cfg = tiny_run_config(dir, seed, generations);
        let data = Data::load(&cfg, Path::new(".")).map_err(|e| e.to_string())?;
        run_evolve(&cfg, &data, None, &mut |_, _| {}).map_err(|e| e.to_string())?;
    }
    let mut bytes = 0;
    for f in [CSV_FILE, BEST_GENOME_FILE] {
        let x = std::fs::read(a.path().join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| e.to_string())?;
        ensure!(x == y, "{f} differs between identical runs");
        bytes += x.len();
    }
    Ok(format!(
        "{generations} generations, {bytes} bytes of CSV and best genome identical"
    ))
}
