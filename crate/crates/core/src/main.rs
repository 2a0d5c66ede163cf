use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use skjump::config::ExperimentConfig;
use skjump::experiment::{self, RunError};

#[derive(Parser)]
#[command(
    name = "skjump",
    version,
    about = "Small-mass limits of jump-driven Langevin dynamics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write results.csv and manifest.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides run.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; falls back to run.threads, then SKJUMP_THREADS.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parse and check a config without simulating.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let cfg = ExperimentConfig::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    cfg.validate()
        .map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load(&config) {
            Ok(cfg) => {
                println!("ok {} {}", cfg.experiment.as_str(), cfg.hash());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => {
            let mut cfg = match load(&config) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let threads = experiment::resolve_threads(threads, cfg.threads);
            match experiment::run(&cfg, &out, threads) {
                Ok(output) => {
                    for note in &output.notes {
                        eprintln!("note: {note}");
                    }
                    println!("wrote {}", out.join(experiment::RESULTS_FILE).display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_code(&e))
                }
            }
        }
    }
}

fn exit_code(e: &RunError) -> u8 {
    e.exit_code() as u8
}
