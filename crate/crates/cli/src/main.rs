use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hessreg_cli::commands::{self, Context};
use hessreg_cli::CliError;

/// Hessian-trace regularization experiments.
///
/// Exit status: 0 on success (including runs flagged as diverged), 1 on a
/// runtime failure, 2 on a configuration error.
#[derive(Debug, Parser)]
#[command(name = "hessreg", version)]
struct Cli {
    /// Directory for artifacts.
    #[arg(long, global = true, env = "HESSREG_OUT_DIR", default_value = "hessreg-out")]
    out: PathBuf,

    /// Override `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for replicate runs and Hessian oracles.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// -v: one line per epoch; -vv: also per-step timings.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model; writes run.csv, run.json and params.txt.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Seed-replicated comparison of variants; writes summary.csv and runs.csv.
    Compare {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Stochastic trace estimate with an optional exact check; writes trace_estimate.json.
    EstimateTrace {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Hessian spectrum and stability class at a point; writes stability.json.
    Stability {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Median per-step wall time of each variant; writes benchmark.csv.
    Benchmark {
        #[arg(short, long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(hessreg_cli::ConfigError::new(format!("--threads: {e}"))))?;
    }
    let ctx = Context { out_dir: cli.out, seed: cli.seed, verbosity: cli.verbose };
    let print = |v: serde_json::Value| println!("{}", serde_json::to_string_pretty(&v).expect("JSON values serialize"));
    match cli.command {
        Command::Train { config } => commands::run_train(&ctx, &commands::load(&config)?),
        Command::Compare { config } => commands::run_compare(&ctx, &commands::load(&config)?),
        Command::Benchmark { config } => commands::run_benchmark(&ctx, &commands::load(&config)?),
        Command::EstimateTrace { config } => commands::run_estimate_trace(&ctx, &commands::load(&config)?).map(print),
        Command::Stability { config } => commands::run_stability(&ctx, &commands::load(&config)?).map(print),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
