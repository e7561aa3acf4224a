//! Experiment configuration: TOML file with environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{gen_rectangles, load_amat, load_idx, Dataset, DatasetError};
use crate::genome::HyperparamRanges;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Prefix of environment variables that override config keys, e.g. `LCDN_SEED=3`.
pub const ENV_PREFIX: &str = "LCDN_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoLamarck,
    NoWeightEvolve,
    StructuralOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoLamarck,
        Ablation::NoWeightEvolve,
        Ablation::StructuralOnly,
    ];

    /// Trained last-layer parameters are written back into the genome.
    pub fn lamarckian(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoWeightEvolve)
    }

    /// Offspring last layers come from weighted crossover and weight mutation
    /// rather than a fresh Glorot draw.
    pub fn weight_evolution(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoLamarck)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoLamarck => "no_lamarck",
            Ablation::NoWeightEvolve => "no_weight_evolve",
            Ablation::StructuralOnly => "structural_only",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            format!("unknown ablation {s:?}, expected one of full, no_lamarck, no_weight_evolve, structural_only")
        })
    }
}

/// Where samples come from. Training data is split into train/validation for
/// evolution; the test set is only used by the final training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_subsample: Option<usize>,
    },
    Amat {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        train_subsample: Option<usize>,
    },
    Rectangles {
        train_size: usize,
        test_size: usize,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Rectangles {
            train_size: 1200,
            test_size: 2000,
        }
    }
}

impl DatasetSpec {
    /// Loads `(train, test)`. Relative paths resolve against `base`.
    pub fn load(&self, base: &Path, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
        let p = |q: &PathBuf| if q.is_absolute() { q.clone() } else { base.join(q) };
        let subsample = |ds: Dataset, n: &Option<usize>| match n {
            Some(n) if *n < ds.len() => ds.subsample(*n, seed),
            _ => ds,
        };
        match self {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_subsample,
            } => {
                let train = load_idx(&p(train_images), &p(train_labels))?;
                let mut test = load_idx(&p(test_images), &p(test_labels))?;
                test.num_classes = test.num_classes.max(train.num_classes);
                Ok((subsample(train, train_subsample), test))
            }
            DatasetSpec::Amat {
                train,
                test,
                train_subsample,
            } => {
                let train = load_amat(&p(train))?;
                let mut test = load_amat(&p(test))?;
                test.num_classes = test.num_classes.max(train.num_classes);
                Ok((subsample(train, train_subsample), test))
            }
            DatasetSpec::Rectangles { train_size, test_size } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5245_4354);
                let train = gen_rectangles(*train_size, &mut rng);
                let test = gen_rectangles(*test_size, &mut rng);
                Ok((train, test))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub seed: u64,
    pub pop_individual: usize,
    pub pop_module: usize,
    pub generations: usize,
    pub num_network: usize,
    pub k_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub validation_fraction: f64,
    pub final_epochs: usize,
    pub ranges: HyperparamRanges,
    pub ablation: Ablation,
    pub target_species: usize,
    /// Starting compatibility threshold for both populations.
    pub species_threshold: f64,
    /// Perturb weights by `±0.01 u` instead of `+0.01 u`.
    pub symmetric_perturbation: bool,
    pub output_dir: PathBuf,
    pub workers: usize,
    /// Fill the `wall_time_s` CSV column; off by default so logs are reproducible byte for byte.
    pub log_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            seed: 0,
            pop_individual: 25,
            pop_module: 30,
            generations: 10,
            num_network: 15,
            k_epochs: 1,
            batch_size: 108,
            lr: 0.001,
            validation_fraction: 0.2,
            final_epochs: 100,
            ranges: HyperparamRanges::default(),
            ablation: Ablation::Full,
            target_species: 4,
            species_threshold: 2.5,
            symmetric_perturbation: false,
            output_dir: PathBuf::from("runs"),
            workers: 1,
            log_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies `LCDN_<KEY>=value` overrides for top-level scalar keys.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<(), ConfigError> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("roundtrip");
        let mut changed = false;
        for (k, v) in vars {
            let Some(key) = k.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            let value = match table.get(&key) {
                Some(toml::Value::Integer(_)) => v
                    .parse::<i64>()
                    .map(toml::Value::Integer)
                    .map_err(|_| ConfigError::Invalid(format!("{k}: expected an integer, got {v:?}")))?,
                Some(toml::Value::Float(_)) => v
                    .parse::<f64>()
                    .map(toml::Value::Float)
                    .map_err(|_| ConfigError::Invalid(format!("{k}: expected a number, got {v:?}")))?,
                Some(toml::Value::Boolean(_)) => v
                    .parse::<bool>()
                    .map(toml::Value::Boolean)
                    .map_err(|_| ConfigError::Invalid(format!("{k}: expected true or false, got {v:?}")))?,
                Some(toml::Value::String(_)) => toml::Value::String(v),
                Some(_) => return Err(ConfigError::Invalid(format!("{k}: only scalar keys can be overridden"))),
                None => return Err(ConfigError::Invalid(format!("{k}: unknown config key {key:?}"))),
            };
            table.insert(key, value);
            changed = true;
        }
        if changed {
            *self = RunConfig::from_toml(&toml::to_string(&table).expect("table serialises"))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.ranges.validate().map_err(ConfigError::Invalid)?;
        if self.pop_individual == 0 || self.pop_module == 0 {
            return bad("population sizes must be positive".into());
        }
        if self.num_network == 0 || self.num_network > self.pop_individual {
            return bad(format!(
                "num_network must be in [1, pop_individual = {}], got {}",
                self.pop_individual, self.num_network
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.target_species == 0 {
            return bad("target_species must be positive".into());
        }
        if !(self.species_threshold > 0.0 && self.species_threshold.is_finite()) {
            return bad(format!(
                "species_threshold must be positive, got {}",
                self.species_threshold
            ));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 over the settings that influence results; `output_dir`,
    /// `workers`, `generations` and `log_wall_time` are excluded so a run can
    /// be resumed elsewhere, with another worker count, or extended.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.workers = 1;
        c.generations = 0;
        c.log_wall_time = false;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
