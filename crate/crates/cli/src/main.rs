use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use gmetro_cli::config::ExperimentConfig;
use gmetro_cli::{commands, CheckpointMissing, Run};

/// Mixture-of-experts graph models under distribution shift.
#[derive(Parser)]
#[command(name = "gmetro", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment definition (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Write artifacts here instead of the configured out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured method across the configured seeds.
    Train(RunArgs),
    /// Score trained checkpoints on every enumerated environment.
    Evaluate(RunArgs),
    /// Measure per-expert sensitivity to each transform kind.
    Invariance(RunArgs),
    /// Read the mixture of shifts off the gate on a planted target.
    Discover(RunArgs),
    /// Join artifacts across methods and seeds into tables and figures.
    Report(RunArgs),
    /// Materialize the configured synthetic dataset to disk.
    GenData(RunArgs),
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::Train(a)
            | Command::Evaluate(a)
            | Command::Invariance(a)
            | Command::Discover(a)
            | Command::Report(a)
            | Command::GenData(a) => a,
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let args = cli.command.args();
    let config = ExperimentConfig::load(&args.config)?;
    let run = Run::new(config, args.seed, args.out.clone());
    match cli.command {
        Command::Train(_) => commands::train_cmd(&run),
        Command::Evaluate(_) => commands::evaluate_cmd(&run),
        Command::Invariance(_) => commands::invariance_cmd(&run),
        Command::Discover(_) => commands::discover_cmd(&run),
        Command::Report(_) => commands::report_cmd(&run),
        Command::GenData(_) => commands::gen_data_cmd(&run),
    }
}

fn main() -> ExitCode {
    // Usage problems exit 1; help and version keep clap's behavior.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    gmetro_cli::init_workers();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<CheckpointMissing>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
