use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mpq_cli::config::{resolve, RunConfig};
use mpq_cli::{run, CliError};

/// Markovian product quantization of Euler schemes: chains, prices, BSDEs.
#[derive(Parser)]
#[command(name = "mpq", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    threads: Option<usize>,
    /// Seed override for sampling-based commands.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the quantized chain and persist grids and transitions.
    BuildChain(CommonArgs),
    /// Price a European payoff ladder against the terminal law.
    Price(CommonArgs),
    /// Solve the configured backward equation and report (y0, z0).
    Bsde(CommonArgs),
    /// Compare transitions and increment weights against Monte Carlo.
    Verify(CommonArgs),
    /// Persist grids, transitions, increment weights and marginals.
    Export(CommonArgs),
}

fn execute(command: &Command) -> Result<String, CliError> {
    let (args, runner): (&CommonArgs, fn(&mpq_cli::config::ResolvedRun) -> Result<String, CliError>) =
        match command {
            Command::BuildChain(a) => (a, run::run_build_chain),
            Command::Price(a) => (a, run::run_price),
            Command::Bsde(a) => (a, run::run_bsde),
            Command::Verify(a) => (a, run::run_verify),
            Command::Export(a) => (a, run::run_export),
        };
    let mut config = RunConfig::from_path(&args.config)?;
    if let Some(out) = &args.out {
        config.output.dir = out.clone();
    }
    if let Some(threads) = args.threads {
        config.run.threads = threads;
    }
    if let Some(seed) = args.seed {
        config.run.seed = seed;
    }
    let resolved = resolve(config)?;
    mpq_core::configure_threads(resolved.threads)
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    runner(&resolved)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
