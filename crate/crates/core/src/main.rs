//! `unifai` command line.
//!
//! Exit status: 0 success, 2 config or validation error, 3 data error,
//! 4 non-finite loss during training, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unifai::cli::{
    cmd_eval, cmd_project, cmd_sweep, cmd_synth, cmd_train, parse_beta_grid, resolve_eval_dataset, RunConfig,
};
use unifai::evaluation::{ProbeConfig, Which};
use unifai::Result;

#[derive(Parser)]
#[command(name = "unifai", version, about = "Adversarial invariance training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the configured train/test sets as dataset caches.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model, write checkpoint, trace and test-set report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset cache or the config's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Supplies the probe settings and, without --dataset, the data.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per beta and write the A_y curve.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated, strictly increasing; defaults to the config's grid.
        #[arg(long)]
        beta_grid: Option<String>,
    },
    /// Write a 2D principal-component projection of e1 or e2.
    Project {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "e1")]
        which: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    RunConfig::load(path)?.resolve(seed)
}

fn load_optional(path: Option<&Path>) -> Result<Option<RunConfig>> {
    path.map(|p| load_config(p, None)).transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let (train, test) = cmd_synth(&cfg, &cfg.output_dir(out.as_deref())?)?;
            println!("{}\n{}", train.display(), test.display());
        }
        Command::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let dir = cfg.output_dir(out.as_deref())?;
            let report = cmd_train(&cfg, &dir)?;
            print!("{}", report.to_toml());
            eprintln!("run written to {}", dir.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            config,
            out,
        } => {
            let cfg = load_optional(config.as_deref())?;
            let data = resolve_eval_dataset(dataset.as_deref(), cfg.as_ref())?;
            let probe = cfg.map(|c| c.probe).unwrap_or_else(ProbeConfig::default);
            print!("{}", cmd_eval(&checkpoint, &data, &probe, &out)?.to_toml());
        }
        Command::Sweep {
            config,
            seed,
            out,
            beta_grid,
        } => {
            let cfg = load_config(&config, seed)?;
            let betas = match beta_grid {
                Some(text) => parse_beta_grid(&text)?,
                None => cfg.sweep.betas.clone(),
            };
            for p in cmd_sweep(&cfg, &betas, &cfg.output_dir(out.as_deref())?)? {
                println!("beta={:e} a_y={:.4}", p.beta, p.a_y);
            }
        }
        Command::Project {
            checkpoint,
            dataset,
            config,
            which,
            out,
        } => {
            let which: Which = which.parse()?;
            let cfg = load_optional(config.as_deref())?;
            let data = resolve_eval_dataset(dataset.as_deref(), cfg.as_ref())?;
            println!("{}", cmd_project(&checkpoint, &data, which, &out)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

