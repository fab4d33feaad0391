use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jko_cli::experiment::RowStatus;
use jko_cli::validate::has_errors;
use jko_cli::{run_experiment, run_oracle, validate_config, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "jko",
    version,
    about = "Run JKO flow experiments against reference solutions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep and write the report; exits with 2 if any row failed.
    Run {
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Resolve names and check the cost hypotheses.
    Validate { config: PathBuf },
    /// Solve only the reference solution.
    Oracle {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load(path: &Path, output: Option<PathBuf>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(o) = output {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, output } => {
            let cfg = load(&config, output)?;
            let outcome = run_experiment(&cfg)?;
            println!(
                "{:>10} {:>6} {:>8} {:>11} {:>11} {:>11} {:>11}",
                "tau", "n", "status", "L1", "weak", "EL", "seconds"
            );
            for (row, t) in outcome.report.rows.iter().zip(&outcome.timings) {
                match (&row.status, &row.metrics) {
                    (RowStatus::Ok, Some(m)) => println!(
                        "{:>10.3e} {:>6} {:>8} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.2}",
                        row.tau,
                        row.resolution,
                        "ok",
                        m.l1_error,
                        m.weak_residual,
                        m.max_el_residual,
                        t.seconds
                    ),
                    _ => println!(
                        "{:>10.3e} {:>6} {:>8} {}",
                        row.tau,
                        row.resolution,
                        "failed",
                        row.reason.as_deref().unwrap_or("")
                    ),
                }
            }
            println!(
                "report written to {}",
                cfg.output_dir.join("report.json").display()
            );
            Ok(if outcome.report.failed_rows() > 0 {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Validate { config } => {
            let cfg = load(&config, None)?;
            let diags = validate_config(&cfg);
            for d in &diags {
                println!("{d}");
            }
            Ok(if has_errors(&diags) {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Oracle { config, output } => {
            let cfg = load(&config, output)?;
            for dir in run_oracle(&cfg)? {
                println!("wrote {}", dir.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
