//! Command line front end.
//!
//! Outputs go next to the config file unless `SOBA_OUTPUT_ROOT` is set.
//! Exit codes: 0 success, 1 I/O, 2 invalid config, 3 divergence, 4 grid
//! search failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use compressed_soba::experiment::{self, ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(name = "soba", version, about = "Compressed distributed bilevel optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every algorithm, seed and sweep value of a config.
    Run { config: PathBuf },
    /// Grid-search stepsizes for every algorithm block of a config.
    Grid { config: PathBuf },
    /// Compare uplink bits needed by two runs to reach a target.
    Compare {
        dir_a: PathBuf,
        dir_b: PathBuf,
        #[arg(long)]
        target: f64,
    },
}

fn root_for(config: &Path) -> PathBuf {
    let base = config.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    experiment::output_root(base)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), ExperimentError> {
    match cmd {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = experiment::run_experiment(&cfg, &root_for(&config))?;
            println!(
                "{} runs written to {}",
                summary.manifest.runs.len(),
                summary.output_dir.display()
            );
        }
        Command::Grid { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            for c in experiment::grid_search(&cfg, &root_for(&config))? {
                println!(
                    "{}: alpha={} beta={} gamma={} score={:e}",
                    c.label, c.config.alpha, c.config.beta, c.config.gamma, c.score
                );
            }
        }
        Command::Compare { dir_a, dir_b, target } => {
            if !(target.is_finite() && target >= 0.0) {
                return Err(ExperimentError::Invalid {
                    field: "--target".into(),
                    msg: "must be a finite nonnegative number".into(),
                });
            }
            println!("{}", experiment::compare_bits(&dir_a, &dir_b, target)?);
        }
    }
    Ok(())
}
