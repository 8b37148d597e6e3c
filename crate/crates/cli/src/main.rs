mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scout_core::agent::Policy;
use scout_core::envs::EnvKind;

#[derive(Parser, Debug)]
#[command(name = "scout", version, about = "Novelty-search exploration runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one exploration episode and write its logs.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write plan_trace.ndjson with every planning tree.
        #[arg(long)]
        plan_trace: bool,
    },
    /// Run consecutive seeds in parallel and aggregate their summaries.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Recompute coverage metrics from a run directory's log.
    Metrics {
        /// Run directory written by `run`.
        #[arg(long)]
        run: PathBuf,
        /// Output CSV (default: metrics.csv in the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write heatmap and representation files for a run directory.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = ExportKind::All)]
        what: ExportKind,
        /// Output directory (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON config; absent fields take the environment defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    env: Option<EnvKind>,
    #[arg(long)]
    policy: Option<Policy>,
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ExportKind {
    Heatmap,
    Representation,
    All,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SCOUT_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
