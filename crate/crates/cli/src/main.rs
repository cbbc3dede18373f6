//! `rtta`: calibrate the style detector, run adaptation episodes on the
//! synthetic recurring-domain harness, and run the variance verification suite.

mod commands;
mod config;
mod error;
mod output;
mod theory;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "rtta", version, about = "Prolonged test-time adaptation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute the new-domain threshold from source styles.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run adaptation episodes and write per-seed and aggregate metrics.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run variance and stability checks; exits 3 if any fails.
    Theory {
        /// Comma-separated subset of sgd_var, ensemble_var, recursion,
        /// fisher_equiv, chebyshev, or `all`.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        checks: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the generated source style vectors as a JSON array.
    ExportStyles {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Calibrate { config } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let r = commands::calibrate(&cfg)?;
            println!(
                "tau = {:.6} (quantile {}, d = {}, {} source styles) -> {}",
                r.tau,
                r.quantile,
                r.d,
                r.source_count,
                cfg.output_dir.join("calibration.json").display()
            );
        }
        Command::Run { config, seeds } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            let agg = commands::run(&cfg)?;
            println!("tau = {:.4}, source accuracy = {:.4}", agg.tau, agg.source_accuracy);
            for m in &agg.methods {
                let first = m.visit_mean.first().copied().unwrap_or(0.0);
                let last = m.visit_mean.last().copied().unwrap_or(0.0);
                println!(
                    "{}: mean error {:.4} ± {:.4}, visit 1 {first:.4}, last visit {last:.4}, detected {:?}",
                    m.method, m.mean_error, m.mean_error_std, m.final_detected_domains
                );
            }
            println!("results in {}", cfg.output_dir.display());
        }
        Command::Theory { checks, config } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let checks = theory::parse_checks(&checks)?;
            let outcomes = theory::run_checks(&cfg.theory, &checks, &cfg.output_dir)?;
            let mut failed = Vec::new();
            for o in &outcomes {
                println!("{}: {} {}", o.check.name(), if o.pass { "PASS" } else { "FAIL" }, o.summary);
                if !o.pass {
                    failed.push(format!("{}: {}", o.check.name(), o.summary));
                }
            }
            if !failed.is_empty() {
                return Err(CliError::Verification(failed.join("; ")));
            }
        }
        Command::ExportStyles { out, config } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let n = commands::export_styles(&cfg, &out)?;
            println!("{n} style vectors -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rtta: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
