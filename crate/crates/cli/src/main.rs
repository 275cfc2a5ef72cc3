//! Command-line harness for training and evaluating learned approximators
//! of parametric bilevel optimization problems.
//!
//! Subcommands: generate, train, eval, oracle, pso, plotdata.
//! Exit codes: 0 success, 2 configuration error, 3 solver failure
//! threshold exceeded.

mod commands;
mod config;
mod io;

use clap::{Parser, Subcommand};
use commands::SolverFailure;
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "bilevel", version, about = "Learned approximators of bilevel optimization with coupling constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct RunArgs {
    /// Path to a TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Name of a built-in preset (bqp3x2, bqp6x4, bqp9x6, twotank,
    /// twotank-desk, hvac, hvac-desk).
    #[arg(long)]
    preset: Option<String>,
    /// Override every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the family and train/val/test datasets.
    Generate(RunArgs),
    /// Train a model on a generated dataset.
    Train(RunArgs),
    /// Evaluate a stored checkpoint on a dataset split.
    Eval(RunArgs),
    /// Certified reference objectives (bqp family).
    Oracle(RunArgs),
    /// Particle-swarm baseline on test instances.
    Pso(RunArgs),
    /// Flatten results bundles into a tidy CSV.
    Plotdata {
        /// Results bundle JSON files.
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_config(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => config::load_config(path)?,
        (None, Some(name)) => config::load_preset(name)
            .ok_or_else(|| anyhow::anyhow!("unknown preset '{name}'"))?,
        (None, None) => anyhow::bail!("pass --config PATH or --preset NAME"),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    if let Some(seed) = args.seed {
        match &mut cfg.family {
            config::FamilyConfig::Bqp { seed: s, .. }
            | config::FamilyConfig::TwoTank { seed: s }
            | config::FamilyConfig::Hvac { seed: s } => *s = seed,
        }
        cfg.dataset.seed = seed;
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        cfg.pso.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    }
    Ok(cfg)
}

fn install_pool(workers: usize) {
    if workers > 0 {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(args) => {
            let cfg = resolve_config(args)?;
            install_pool(cfg.workers);
            commands::cmd_generate(&cfg)
        }
        Command::Train(args) => {
            let cfg = resolve_config(args)?;
            install_pool(cfg.workers);
            commands::cmd_train(&cfg)
        }
        Command::Eval(args) => {
            let cfg = resolve_config(args)?;
            install_pool(cfg.workers);
            commands::cmd_eval(&cfg)
        }
        Command::Oracle(args) => {
            let cfg = resolve_config(args)?;
            install_pool(cfg.workers);
            commands::cmd_oracle(&cfg)
        }
        Command::Pso(args) => {
            let cfg = resolve_config(args)?;
            install_pool(cfg.workers);
            commands::cmd_pso(&cfg)
        }
        Command::Plotdata { inputs, out } => commands::cmd_plotdata(inputs, out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<SolverFailure>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
