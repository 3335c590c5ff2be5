use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedpart::verify::{run_suite, Fault, Status, Suite, SuiteOptions};
use fedpart_cli::runner::{divergence, display_path, output_dir};
use fedpart_cli::ExperimentConfig;

/// Partially personalized federated learning on synthetic objectives.
#[derive(Parser)]
#[command(name = "fedpart", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed (overrides `seed` in the config).
        #[arg(long, env = "FEDPART_SEED")]
        seed: Option<u64>,
    },
    /// Run the numerical oracles and print one record per check.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately break an oracle to check that it is caught.
        #[arg(long, default_value = "none")]
        inject_fault: Fault,
        /// Also write the records to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the tuned step sizes for the `[tune]` table of a config.
    Tune {
        config: PathBuf,
        #[arg(long, env = "FEDPART_SEED")]
        seed: Option<u64>,
    },
    /// Re-run a manifest written by `run`.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let dir = output_dir(out.as_deref(), &cfg);
            let report = fedpart_cli::run(&cfg, &dir)?;
            println!("wrote {}", display_path(&report.out_dir));
            if let Some(rows) = &report.comparison {
                for r in rows {
                    let hit = r.rounds_to_threshold.map_or("never".to_string(), |t| t.to_string());
                    println!("{}: rounds_to_threshold={hit} min_stationarity={:e}", r.algorithm, r.min_stationarity);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            suite,
            seed,
            inject_fault,
            report,
        } => {
            let reports = run_suite(suite, &SuiteOptions { seed, fault: inject_fault })?;
            let text: String = reports.iter().map(|r| format!("{r}\n")).collect();
            print!("{text}");
            if let Some(path) = report {
                std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
            let failed = reports.iter().filter(|r| r.status == Status::Fail).count();
            if failed > 0 {
                eprintln!("{failed} check(s) failed");
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Tune { config, seed } => {
            let cfg = load(&config, seed)?;
            print!("{}", fedpart_cli::tune(&cfg)?.render());
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay { manifest, out } => {
            let dir = out.unwrap_or_else(|| PathBuf::from("fedpart-replay"));
            let report = fedpart_cli::replay(&manifest, &dir)?;
            println!("wrote {}", display_path(&report.out_dir));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if divergence(&e).is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
