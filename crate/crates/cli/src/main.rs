use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use nsf_cli::config::{ingest_config, Mode};
use nsf_cli::run::{run, RunError};

/// Extended Navier-Stokes-Fourier solver and ensemble statistics.
#[derive(Debug, Parser)]
#[command(name = "nsf", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `mode` from the configuration.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Overrides `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must be absent or empty.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Log at debug level.
    #[arg(long, short)]
    verbose: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let ingested = match ingest_config(&cli.config) {
        Ok(c) => c,
        Err(e) => return report(&RunError::Config(e)),
    };
    let mut config = ingested.config;
    for w in &ingested.warnings {
        log::warn!("{w}");
    }
    config.apply_overrides(cli.mode, cli.seed, cli.workers);
    let out = cli.out.unwrap_or_else(|| PathBuf::from(&config.out_dir));
    match run(&config, &out) {
        Ok(outcome) => {
            log::info!("manifest written to {}", outcome.manifest_path.display());
            match outcome.failure {
                Some(f) => {
                    log::error!("numerical failure: {f}");
                    ExitCode::from(3)
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => report(&e),
    }
}

fn report(e: &RunError) -> ExitCode {
    log::error!("{e}");
    match e {
        RunError::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}
