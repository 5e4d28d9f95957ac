//! `dymus` — prepare data, train, evaluate, ablate and analyze the
//! multi-behavior recommenders from one declarative config file.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config problem.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::ConfigProblem;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "dymus", version, about = "Multi-behavior sequential recommenders with dynamic routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override train.seed before anything runs (changes the run hash).
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing artifacts of this config.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest or synthesize interactions and write the canonical dataset.
    Prepare(CommonArgs),
    /// Train the configured model and write checkpoint + metrics.
    Train(CommonArgs),
    /// Re-evaluate the trained checkpoint on validation and test.
    Eval(CommonArgs),
    /// Train the ablation arms (integrators, behavior removals).
    Ablate(CommonArgs),
    /// Routing-drift or item-importance analysis of the trained checkpoint.
    Analyze(CommonArgs),
    /// Train over the (capsule length, routing iterations) grid.
    Sweep(CommonArgs),
}

type CommandFn = fn(&RunConfig, bool) -> anyhow::Result<()>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, run): (&CommonArgs, CommandFn) = match &cli.command {
        Command::Prepare(a) => (a, commands::cmd_prepare),
        Command::Train(a) => (a, commands::cmd_train),
        Command::Eval(a) => (a, commands::cmd_eval),
        Command::Ablate(a) => (a, commands::cmd_ablate),
        Command::Analyze(a) => (a, commands::cmd_analyze),
        Command::Sweep(a) => (a, commands::cmd_sweep),
    };

    let config = match RunConfig::load(&args.config, args.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run(&config, args.force) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ConfigProblem>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
