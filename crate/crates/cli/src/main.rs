//! `rime` — train experts, record demonstrations, run adversarial imitation,
//! and sweep the result across perturbed dynamics.
//!
//! Exit codes: 0 success, 1 failed theory checks, 2 configuration error,
//! 3 missing or malformed artifact, 4 numerical abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CliError, Ctx};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "rime", version, about = "Robust imitation learning laboratory")]
struct Cli {
    /// Path to a TOML run manifest.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the manifest's `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for data-parallel phases.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Output directory; overrides the manifest's `run.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or construct) one expert per configured dynamics setting.
    TrainExpert,
    /// Roll out saved experts and record demonstration sets.
    GenDemos,
    /// Train an imitation policy from recorded demonstrations.
    TrainIl,
    /// Evaluate a checkpoint across a grid of dynamics scale factors.
    Sweep,
    /// Run exact small-scale checks of the underlying theory.
    VerifyTheory,
    /// Merge sweep reports into a comparison table.
    Compare {
        /// `.sweep.json` files produced by the sweep command.
        files: Vec<PathBuf>,
    },
}

fn load_ctx(cli: &Cli) -> Result<Ctx, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("this command requires --config <manifest.toml>".into()))?;
    let cfg = RunConfig::load(path).map_err(CliError::Config)?;
    Ok(Ctx::new(cfg, cli.out.clone(), cli.seed, cli.workers))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::TrainExpert => commands::cmd_train_expert(&load_ctx(cli)?),
        Command::GenDemos => commands::cmd_gen_demos(&load_ctx(cli)?),
        Command::TrainIl => commands::cmd_train_il(&load_ctx(cli)?),
        Command::Sweep => commands::cmd_sweep(&load_ctx(cli)?),
        Command::VerifyTheory => {
            commands::cmd_verify_theory(cli.seed.unwrap_or(0), cli.out.as_deref())
        }
        Command::Compare { files } => commands::cmd_compare(files, cli.out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
