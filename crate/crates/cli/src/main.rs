//! `fscil`: feature extraction, staged or full protocol runs and the oracle
//! suite from the command line.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime or divergence
//! error, 3 verification failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "fscil", version, about = "Few-shot class-incremental audio classification")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Featurise every manifest clip into a cache file.
    Extract {
        /// Cache path; defaults to `<out-dir>/features.bin`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the base session and write `session-0.ckpt`.
    TrainBase,
    /// Run the session after the one a checkpoint ends with.
    TrainIncr {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on every session it covers.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Base plus every incremental session, with reports.
    Run,
    /// Gradient, SupCon, table and sampler checks.
    Verify,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli.overrides)?;
    if let Some(n) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    info!("effective config: {}", cfg.to_json());
    match &cli.command {
        Command::Extract { out } => commands::extract(&cfg, out.clone()),
        Command::TrainBase => commands::train_base_cmd(&cfg),
        Command::TrainIncr { checkpoint } => commands::train_incr_cmd(&cfg, checkpoint),
        Command::Eval { checkpoint } => commands::eval_cmd(&cfg, checkpoint),
        Command::Run => commands::run_cmd(&cfg),
        Command::Verify => commands::verify_cmd(&cfg),
        Command::ShowConfig => {
            print!("{}", toml::to_string(&cfg).expect("config serialises"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
