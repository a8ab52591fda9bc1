//! Command-line runner: config loading, stage execution and the run manifest.

pub mod config;
pub mod manifest;
pub mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand};

use crate::pipeline::Runner;

#[derive(Debug, Parser)]
#[command(name = "tjsim", version, about = "Exact-diagonalization twin of a Rydberg t-J simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Replace every seed in the config by this value.
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,
    /// Overwrite outputs of a different config.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Ground state, low spectrum and optional binding-energy sweeps.
    Ground,
    /// Light-shift ramp from the product state.
    Ramp,
    /// Shot sampling from the ramp or ground state.
    Measure,
    /// Correlators from shot files.
    Reconstruct,
    /// Boltzmann model of preparation errors fitted to shot files.
    FitInit,
    /// Three-site plaquette check against the analytic bands.
    Toycheck,
    /// Every stage present in the config.
    Run,
}

pub fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    if cli.command == Command::Toycheck {
        let (text, ok) = pipeline::toycheck(1.0)?;
        print!("{text}");
        return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
    }
    let path = cli.config.ok_or_else(|| anyhow!("--config is required for this subcommand"))?;
    let loaded = config::load(&path)?;
    let mut runner = Runner::open(loaded, cli.out, cli.seed_override, cli.force)?;
    match cli.command {
        Command::Ground => runner.ground()?,
        Command::Ramp => runner.ramp()?,
        Command::Measure => runner.measure()?,
        Command::Reconstruct => runner.reconstruct()?,
        Command::FitInit => runner.fit_init()?,
        Command::Run => runner.run_all()?,
        Command::Toycheck => unreachable!(),
    }
    eprintln!("outputs in {}", runner.dir.display());
    Ok(ExitCode::SUCCESS)
}
