//! `kansae <synth|train|compare|steer> --config <path> [--out <dir>] [--seed <u64>] [--force]`
//!
//! Exit codes: 0 success, 2 config/validation, 3 IO, 4 numerical abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, ValueEnum};

use crate::commands::Ctx;
use crate::config::{resolve, ExperimentConfig};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// Generate a synthetic activation store with ground truth.
    Synth,
    /// Train an SAE (kan or relu) on an activation store.
    Train,
    /// Evaluate two checkpoints side by side.
    Compare,
    /// Dose-response of steering one feature.
    Steer,
}

#[derive(Debug, Parser)]
#[command(name = "kansae", version, about = "KAN sparse autoencoder experiments")]
struct Cli {
    command: Command,
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `out_dir` from the config, then the
    /// config's own directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Steer features that are not alive.
    #[arg(long)]
    force: bool,
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub err: anyhow::Error,
}

impl Failure {
    pub fn config(err: anyhow::Error) -> Self {
        Self {
            code: EXIT_CONFIG,
            err,
        }
    }

    pub fn io(err: anyhow::Error) -> Self {
        Self { code: EXIT_IO, err }
    }

    pub fn from_core(e: kansae::Error, context: String) -> Self {
        Self {
            code: commands::classify(&e),
            err: anyhow::Error::new(e).context(context),
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("KANSAE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        Failure::config(anyhow!(
            "KANSAE_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    if n == 1 {
        kansae::par::set_sequential(true);
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(anyhow!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let text = std::fs::read_to_string(&cli.config)
        .with_context(|| format!("reading {}", cli.config.display()))
        .map_err(Failure::io)?;
    let mut cfg = ExperimentConfig::parse(&text)
        .with_context(|| format!("invalid config {}", cli.config.display()))
        .map_err(Failure::config)?;
    cfg.apply_seed(cli.seed);

    let base = cli
        .config
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_default();
    let out = match (&cli.out, &cfg.out_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => resolve(&base, o),
        (None, None) => base.clone(),
    };
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(Failure::io)?;

    let ctx = Ctx {
        cfg,
        base,
        out,
        force: cli.force,
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Compare => commands::compare(&ctx),
        Command::Steer => commands::steer(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
