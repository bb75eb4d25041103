use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nfqs_cli::check::Fault;
use nfqs_cli::config::{Experiment, ExperimentConfig, Preset};
use nfqs_cli::{run::run, EXIT_OK};

/// Neural quantum states from normalizing flows.
#[derive(Parser)]
#[command(name = "nfqs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a variational ground state (optionally a g2 × depth sweep).
    Ground(Common),
    /// Prepare the tunneling start and evolve it in real time.
    Evolve(Common),
    /// Path-integral Monte Carlo energy of the trap.
    Pimc(Common),
    /// Grid reference for the tunneling run.
    Exact(Common),
    /// Run the invariant and oracle suite; exits 1 on any failure.
    Check {
        #[command(flatten)]
        common: Common,
        /// Break one quantity on purpose to show the suite catches it.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML file merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "quick")]
    preset: Preset,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, common, fault) = match cli.command {
        Command::Ground(c) => (Experiment::Ground, c, None),
        Command::Evolve(c) => (Experiment::Evolve, c, None),
        Command::Pimc(c) => (Experiment::Pimc, c, None),
        Command::Exact(c) => (Experiment::Exact, c, None),
        Command::Check { common, inject_fault } => (Experiment::Check, common, inject_fault),
    };
    let result = ExperimentConfig::resolve(
        experiment,
        common.preset,
        common.config.as_deref(),
        common.seed,
        common.out.as_deref(),
    )
    .and_then(|cfg| run(&cfg, fault));
    match result {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("nfqs: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
