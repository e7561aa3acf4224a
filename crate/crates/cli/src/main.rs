use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lcodeepneat::config::{Ablation, RunConfig};
use lcodeepneat::evolution::{EvalRecord, GenerationStats};
use lcodeepneat::runner::{
    checkpoint_resume, export, run_evolve, run_repeated, run_train_best, BestGenomeFile, Data, ExportFormat,
    BEST_GENOME_FILE, CHECKPOINT_FILE,
};

/// Co-evolves CNN architectures and their last-layer weights.
///
/// Settings are read from the config file, then from `LCDN_<KEY>`
/// environment variables, then from command-line flags.
#[derive(Parser, Debug)]
#[command(name = "lcdn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run evolution and write the generation log, best genome and checkpoints.
    Evolve {
        #[command(flatten)]
        common: Common,
        /// Independent runs with consecutive seeds, each in `run_<r>/`.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
    /// Continue an interrupted run from its checkpoint.
    Resume {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<output-dir>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the best genome on the full training set and report test error.
    TrainBest {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<output-dir>/best_genome.json`.
        #[arg(long)]
        genome: Option<PathBuf>,
    },
    /// Write the best genome as a Graphviz graph or JSON document.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        genome: Option<PathBuf>,
        /// `dot` or `json`.
        #[arg(long, default_value = "dot")]
        format: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file with run settings; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// full, no_lamarck, no_weight_evolve or structural_only.
    #[arg(long)]
    ablation: Option<Ablation>,
}

impl Common {
    /// Resolved config and the directory relative dataset paths start from.
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let (mut cfg, base) = match &self.config {
            Some(path) => (
                RunConfig::from_file(path)?,
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (RunConfig::default(), PathBuf::from(".")),
        };
        cfg.apply_env(std::env::vars())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(a) = self.ablation {
            cfg.ablation = a;
        }
        cfg.validate()?;
        Ok((cfg, base))
    }
}

fn report(stats: &GenerationStats, records: &[EvalRecord]) {
    for r in records.iter().filter(|r| r.failure.is_some()) {
        eprintln!(
            "  candidate {} failed: {}",
            r.individual_id,
            r.failure.as_deref().unwrap_or_default()
        );
    }
    eprintln!(
        "generation {:>3}  best {:.4}  mean {:.4}  species {}/{}  params {}  {:.1}s",
        stats.generation,
        stats.best_fitness,
        stats.mean_fitness,
        stats.num_species_ind,
        stats.num_species_mod,
        stats.best_param_count,
        stats.wall_time_s
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Evolve { common, repeat } => {
            let (cfg, base) = common.resolve()?;
            if repeat == 0 {
                bail!("--repeat must be at least 1");
            }
            if repeat == 1 {
                let data = Data::load(&cfg, &base)?;
                let s = run_evolve(&cfg, &data, None, &mut report)?;
                println!(
                    "best validation accuracy {:.4} ({} parameters) after {} generations, written to {}",
                    s.best_fitness,
                    s.best_param_count,
                    s.generations,
                    s.output_dir.display()
                );
            } else {
                let runs = run_repeated(&cfg, &base, repeat, &mut |r, h, recs| {
                    eprint!("run {r}: ");
                    report(h, recs);
                })?;
                let fits: Vec<f64> = runs.iter().map(|s| s.best_fitness).collect();
                let mean = fits.iter().sum::<f64>() / fits.len() as f64;
                let best = fits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                println!(
                    "{repeat} runs: mean best accuracy {mean:.4}, best {best:.4}, summary in {}",
                    cfg.output_dir.display()
                );
            }
        }
        Command::Resume { common, checkpoint } => {
            let (cfg, base) = common.resolve()?;
            let path = checkpoint.unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE));
            let state = checkpoint_resume(&path, &cfg)?;
            eprintln!("resuming at generation {} of {}", state.generation, cfg.generations);
            let data = Data::load(&cfg, &base)?;
            let s = run_evolve(&cfg, &data, Some(state), &mut report)?;
            println!(
                "best validation accuracy {:.4} ({} parameters) after {} generations",
                s.best_fitness, s.best_param_count, s.generations
            );
        }
        Command::TrainBest { common, genome } => {
            let (cfg, base) = common.resolve()?;
            let path = genome.unwrap_or_else(|| cfg.output_dir.join(BEST_GENOME_FILE));
            let file = BestGenomeFile::load(&path)?;
            let data = Data::load(&cfg, &base)?;
            let r = run_train_best(&cfg, &data, &file)?;
            fs::create_dir_all(&cfg.output_dir).with_context(|| cfg.output_dir.display().to_string())?;
            let out = cfg.output_dir.join("train_best.json");
            fs::write(&out, serde_json::to_string_pretty(&r)? + "\n").with_context(|| out.display().to_string())?;
            println!(
                "test error {:.4} ({} of {} test samples), {} parameters, {} epochs",
                r.test_error,
                (r.test_error * r.test_samples as f64).round() as usize,
                r.test_samples,
                r.param_count,
                r.final_epochs
            );
        }
        Command::Export {
            common,
            genome,
            format,
            out,
        } => {
            let format: ExportFormat = format.parse()?;
            let (cfg, _) = common.resolve()?;
            let path = genome.unwrap_or_else(|| cfg.output_dir.join(BEST_GENOME_FILE));
            let text = export(&BestGenomeFile::load(&path)?, format)?;
            match out {
                Some(p) => fs::write(&p, text).with_context(|| p.display().to_string())?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
