//! `mldfm` command-line tool: simulate panels, estimate factors and their
//! asymptotic MSE, and run Monte Carlo experiments.
//!
//! Exit codes: 0 on success, 2 for input or configuration errors, 3 for
//! numerical and estimation failures. Log verbosity is read from `MLDFM_LOG`.

mod commands;
mod config;
mod failure;
mod manifest;
mod table_io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mldfm::mse::Variant;
use mldfm::pc::Estimator;

use crate::commands::MseInputs;
use crate::failure::CliResult;

#[derive(Parser)]
#[command(name = "mldfm", version, about = "Multi-level dynamic factor models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one panel from a design and write it with the true factors,
    /// loadings and idiosyncratic covariance.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate factors and loadings of a panel.
    Estimate {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `pc` or `sls`; defaults to the config, then to the model type.
        #[arg(long, value_parser = parse_estimator)]
        method: Option<Estimator>,
    },
    /// Estimate the per-period asymptotic MSE of given factor estimates.
    Mse {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        factors: PathBuf,
        #[arg(long)]
        loadings: PathBuf,
        /// `hr`, `hrs`, `fpr` or `fprs`.
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Estimator used when re-estimating on subsamples.
        #[arg(long, value_parser = parse_estimator)]
        method: Option<Estimator>,
    },
    /// Run a Monte Carlo experiment and write its table and histogram data.
    Montecarlo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to the available hardware parallelism.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a `table.csv` as an aligned text table.
    Report {
        #[arg(long)]
        table: PathBuf,
    },
}

fn parse_estimator(s: &str) -> Result<Estimator, String> {
    match s.to_ascii_lowercase().as_str() {
        "pc" => Ok(Estimator::Pc),
        "sls" => Ok(Estimator::Sls),
        _ => Err(format!("unknown method `{s}` (expected pc or sls)")),
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { config, out, seed } => commands::simulate(&config, &out, seed),
        Command::Estimate {
            panel,
            config,
            out,
            method,
        } => commands::estimate(&panel, method, &config, &out),
        Command::Mse {
            panel,
            factors,
            loadings,
            variant,
            config,
            out,
            method,
        } => {
            let inputs = MseInputs {
                panel,
                factors,
                loadings,
                variant,
                method,
            };
            commands::mse(&inputs, &config, &out)
        }
        Command::Montecarlo {
            config,
            out,
            workers,
            seed,
        } => {
            let workers = workers
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
                .max(1);
            commands::montecarlo(&config, &out, workers, seed)
        }
        Command::Report { table } => {
            print!("{}", commands::report(&table)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MLDFM_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code)
        }
    }
}
