//! Experiment driver: evolution runs with per-generation CSV logs and
//! checkpoints, final training of the best genome, and exports.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{assemble_with, to_dot, AssemblyError, CompiledNetwork, TrainError};
use crate::config::{ConfigError, RunConfig};
use crate::dataset::{split_train_val, Dataset, DatasetError, SplitSpec};
use crate::evolution::{next_generation, BestGenome, EvalRecord, EvolutionError, GenerationStats, RunState};
use crate::tensor::{AdamConfig, TensorError};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const BEST_GENOME_SCHEMA_VERSION: u32 = 1;

pub const CSV_FILE: &str = "generations.csv";
pub const BEST_GENOME_FILE: &str = "best_genome.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPEATS_FILE: &str = "repeats.csv";

pub const CSV_HEADER: [&str; 7] = [
    "generation",
    "best_fitness",
    "mean_fitness",
    "num_species_ind",
    "num_species_mod",
    "best_param_count",
    "wall_time_s",
];

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("genome file {path}: {reason}")]
    GenomeFile { path: PathBuf, reason: String },
    #[error("unknown export format {0:?}, expected dot or json")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String, RunError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes through a temporary file so readers never see partial content.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Training, validation and test sets of one run.
#[derive(Clone, Debug)]
pub struct Data {
    /// The full training set, used by the final training run.
    pub full_train: Dataset,
    /// `full_train` minus the validation split, used during evolution.
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Data {
    /// Loads the configured dataset; relative paths resolve against `base`.
    pub fn load(cfg: &RunConfig, base: &Path) -> Result<Self, RunError> {
        let (full_train, test) = cfg.dataset.load(base, cfg.seed)?;
        let (train, val) = split_train_val(
            &full_train,
            SplitSpec {
                validation_fraction: cfg.validation_fraction,
                seed: cfg.seed,
            },
        )?;
        Ok(Self {
            full_train,
            train,
            val,
            test,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config_hash: String,
    pub state: RunState,
}

pub fn checkpoint_save(state: &RunState, cfg: &RunConfig, path: &Path) -> Result<(), RunError> {
    let doc = Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        state: state.clone(),
    };
    let text = serde_json::to_string(&doc).expect("run state serialises");
    write_atomic(path, text.as_bytes())
}

/// Loads a checkpoint, refusing other schema versions and checkpoints
/// written under a config with a different hash.
pub fn checkpoint_resume(path: &Path, cfg: &RunConfig) -> Result<RunState, RunError> {
    let refuse = |reason: String| RunError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let text = read(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| refuse(format!("not valid JSON: {e}")))?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(CHECKPOINT_SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(refuse(format!(
                "schema_version {v} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})"
            )))
        }
        None => return Err(refuse("missing schema_version".into())),
    }
    let doc: Checkpoint = serde_json::from_value(value).map_err(|e| refuse(format!("malformed: {e}")))?;
    let expected = cfg.hash();
    if doc.config_hash != expected {
        return Err(refuse(format!(
            "written under config hash {}, current config hashes to {expected}",
            doc.config_hash
        )));
    }
    Ok(doc.state)
}

/// The best candidate of a run together with what is needed to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BestGenomeFile {
    pub schema_version: u32,
    pub config_hash: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub best: BestGenome,
}

impl BestGenomeFile {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("genome file serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| format!("not valid JSON: {e}"))?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(BEST_GENOME_SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(format!(
                    "schema_version {v} is not supported (expected {BEST_GENOME_SCHEMA_VERSION})"
                ))
            }
            None => return Err("missing schema_version".into()),
        }
        serde_json::from_value(value).map_err(|e| format!("malformed: {e}"))
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        Self::from_json(&read(path)?).map_err(|reason| RunError::GenomeFile {
            path: path.to_path_buf(),
            reason,
        })
    }

    /// Compiles the recorded network with fresh hidden weights drawn from `rng`.
    pub fn network(&self, adam: AdamConfig, rng: &mut ChaCha8Rng) -> Result<CompiledNetwork, AssemblyError> {
        let b = &self.best;
        Ok(assemble_with(
            &b.individual,
            &b.modules,
            &b.chosen_module_ids,
            &self.input_shape,
            adam,
            rng,
        )?
        .network)
    }
}

/// CSV text for the generations completed so far.
pub fn generations_csv(history: &[GenerationStats], log_wall_time: bool) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for h in history {
        let wall = if log_wall_time {
            format!("{:.3}", h.wall_time_s)
        } else {
            String::new()
        };
        w.write_record([
            h.generation.to_string(),
            h.best_fitness.to_string(),
            h.mean_fitness.to_string(),
            h.num_species_ind.to_string(),
            h.num_species_mod.to_string(),
            h.best_param_count.to_string(),
            wall,
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvolveSummary {
    pub output_dir: PathBuf,
    pub generations: usize,
    pub best_fitness: f64,
    pub best_param_count: usize,
}

/// Receives each finished generation with its evaluation records.
pub type Progress<'a> = dyn FnMut(&GenerationStats, &[EvalRecord]) + 'a;

/// Runs (or continues) evolution until `cfg.generations` are complete. After
/// every generation the CSV log, best-genome file and checkpoint in
/// `cfg.output_dir` are rewritten.
pub fn run_evolve(
    cfg: &RunConfig,
    data: &Data,
    resume: Option<RunState>,
    progress: &mut Progress<'_>,
) -> Result<EvolveSummary, RunError> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let mut state = match resume {
        Some(s) => s,
        None => RunState::new(cfg, data.full_train.num_classes)?,
    };
    write_outputs(&state, cfg, data)?;
    while state.generation < cfg.generations {
        let records = next_generation(&mut state, cfg, &data.train, &data.val)?;
        write_outputs(&state, cfg, data)?;
        progress(state.history.last().expect("generation logged"), &records);
    }
    Ok(EvolveSummary {
        output_dir: dir.clone(),
        generations: state.generation,
        best_fitness: state.best_fitness(),
        best_param_count: state.best.as_ref().map_or(0, |b| b.param_count),
    })
}

fn write_outputs(state: &RunState, cfg: &RunConfig, data: &Data) -> Result<(), RunError> {
    let dir = &cfg.output_dir;
    write_atomic(
        &dir.join(CSV_FILE),
        generations_csv(&state.history, cfg.log_wall_time).as_bytes(),
    )?;
    if let Some(best) = &state.best {
        let file = BestGenomeFile {
            schema_version: BEST_GENOME_SCHEMA_VERSION,
            config_hash: cfg.hash(),
            input_shape: data.full_train.sample_shape(),
            num_classes: data.full_train.num_classes,
            best: best.clone(),
        };
        write_atomic(&dir.join(BEST_GENOME_FILE), file.to_json().as_bytes())?;
    }
    checkpoint_save(state, cfg, &dir.join(CHECKPOINT_FILE))
}

/// Independent runs with seeds `seed, seed+1, ...`, each in its own
/// `run_<r>` subdirectory, summarised in `repeats.csv`.
pub fn run_repeated(
    cfg: &RunConfig,
    base: &Path,
    repeats: usize,
    progress: &mut dyn FnMut(usize, &GenerationStats, &[EvalRecord]),
) -> Result<Vec<EvolveSummary>, RunError> {
    let mut out = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(r as u64);
        c.output_dir = cfg.output_dir.join(format!("run_{r}"));
        let data = Data::load(&c, base)?;
        out.push(run_evolve(&c, &data, None, &mut |h, recs| progress(r, h, recs))?);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "seed", "best_fitness", "best_param_count"])
        .expect("in-memory write");
    for (r, s) in out.iter().enumerate() {
        w.write_record([
            r.to_string(),
            cfg.seed.wrapping_add(r as u64).to_string(),
            s.best_fitness.to_string(),
            s.best_param_count.to_string(),
        ])
        .expect("in-memory write");
    }
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    write_atomic(
        &cfg.output_dir.join(REPEATS_FILE),
        &w.into_inner().expect("in-memory flush"),
    )?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainBestReport {
    pub final_epochs: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub test_accuracy: f64,
    pub test_error: f64,
    pub param_count: usize,
    pub final_train_loss: Option<f64>,
}

/// Seed of the final training run, kept apart from the evolution streams.
fn final_seed(seed: u64) -> u64 {
    seed ^ 0x4649_4e41_4c00_0000
}

/// Trains the recorded best genome for `cfg.final_epochs` on the full
/// training set and scores it on the test set.
pub fn run_train_best(cfg: &RunConfig, data: &Data, genome: &BestGenomeFile) -> Result<TrainBestReport, RunError> {
    let mismatch = |reason: String| RunError::GenomeFile {
        path: PathBuf::from(BEST_GENOME_FILE),
        reason,
    };
    if genome.input_shape != data.full_train.sample_shape() {
        return Err(mismatch(format!(
            "genome expects inputs {:?}, dataset provides {:?}",
            genome.input_shape,
            data.full_train.sample_shape()
        )));
    }
    if genome.num_classes != data.full_train.num_classes {
        return Err(mismatch(format!(
            "genome has {} classes, dataset has {}",
            genome.num_classes, data.full_train.num_classes
        )));
    }
    if let Err(v) = genome.best.individual.validate(&cfg.ranges) {
        return Err(mismatch(format!("genome violates the configured ranges: {v:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(final_seed(cfg.seed));
    let mut net = genome.network(AdamConfig::with_lr(cfg.lr), &mut rng)?;
    let mut loss = None;
    for _ in 0..cfg.final_epochs {
        loss = Some(net.train_epoch(&data.full_train, cfg.batch_size, &mut rng)?.mean_loss);
    }
    let acc = net.accuracy(&data.test, &mut rng)?;
    Ok(TrainBestReport {
        final_epochs: cfg.final_epochs,
        train_samples: data.full_train.len(),
        test_samples: data.test.len(),
        test_accuracy: acc,
        test_error: 1.0 - acc,
        param_count: net.param_count(),
        final_train_loss: loss,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Dot,
    Json,
}

impl FromStr for ExportFormat {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self, RunError> {
        match s {
            "dot" => Ok(ExportFormat::Dot),
            "json" => Ok(ExportFormat::Json),
            other => Err(RunError::Format(other.to_string())),
        }
    }
}

/// Renders the best genome as a Graphviz graph of its network or as the
/// genome document itself.
pub fn export(genome: &BestGenomeFile, format: ExportFormat) -> Result<String, RunError> {
    match format {
        ExportFormat::Json => Ok(genome.to_json()),
        ExportFormat::Dot => {
            // Layer structure does not depend on the weight draw.
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            Ok(to_dot(&genome.network(AdamConfig::default(), &mut rng)?, true))
        }
    }
}
