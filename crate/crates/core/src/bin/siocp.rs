use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use siocp::harness::{self, RunConfig, SuiteScale, SweepGrid};
use siocp::Error;

#[derive(Parser)]
#[command(name = "siocp", version, about = "Staggered integral online conformal prediction on a simulated quadcopter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run closed-loop episodes and write logs plus metrics.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Freeze the residual model at its prior.
        #[arg(long)]
        no_adapt: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Overrides the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a property suite (or `all`) and print a JSON report.
    Verify {
        #[arg(long)]
        suite: String,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a parameter grid in parallel and write one aggregated CSV.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Fit the prior's output layer on an adaptation-off run.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        ridge: f64,
    },
    /// Report the disturbance rate percentile used to choose the Lipschitz constant.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 99.0)]
        percentile: f64,
    },
}

fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) | Error::Parse { .. } => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

/// Any failure to read a configuration is reported as a configuration error.
fn unreadable_as_config(e: Error) -> Error {
    match e {
        Error::Io { .. } => Error::Config(e.to_string()),
        other => other,
    }
}

fn load_config(path: &std::path::Path) -> siocp::Result<RunConfig> {
    RunConfig::load(path).map_err(unreadable_as_config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(command: Command) -> siocp::Result<ExitCode> {
    match command {
        Command::Run {
            config,
            no_adapt,
            seed,
            episodes,
            output,
        } => {
            let mut cfg = load_config(&config)?;
            if no_adapt {
                cfg.adapt = false;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = episodes {
                cfg.episodes = n;
            }
            if output.is_some() {
                cfg.output_dir = output;
            }
            cfg.validate()?;
            let report = harness::run(&cfg)?;
            let mut summary = serde_json::to_value(&report.metrics)?;
            if let Some(map) = summary.as_object_mut() {
                map.remove("per_episode");
            }
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { suite, report } => {
            let names: Vec<&str> = if suite == "all" {
                harness::SUITES.to_vec()
            } else {
                vec![suite.as_str()]
            };
            let scale = SuiteScale::default();
            let mut reports = Vec::new();
            for name in names {
                reports.push(harness::run_suite(name, &scale)?);
            }
            let passed = reports.iter().all(|r| r.passed);
            let text = serde_json::to_string_pretty(&reports)?;
            println!("{text}");
            if let Some(path) = report {
                std::fs::write(&path, &text).map_err(|e| Error::Io { path, source: e })?;
            }
            Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Sweep { grid } => {
            let grid = SweepGrid::load(&grid).map_err(unreadable_as_config)?;
            let base = load_config(&grid.config)?;
            let rows = harness::sweep(&grid, &base);
            harness::sweep::write_csv(&rows, &grid.output)?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            println!("{} runs, {failed} failed, written to {}", rows.len(), grid.output.display());
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Pretrain { config, output, ridge } => {
            let cfg = load_config(&config)?;
            let model = harness::pretrain(&cfg, ridge)?;
            model.save(&output)?;
            println!("prior written to {} (|theta| = {:.4})", output.display(), model.theta_norm());
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate { config, percentile } => {
            let cfg = load_config(&config)?;
            let c = harness::calibrate(&cfg, percentile)?;
            println!("{}", serde_json::to_string_pretty(&c)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
