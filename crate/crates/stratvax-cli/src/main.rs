//! Batch front door for principal-stratum vaccine-effect estimation: run
//! estimations, bounds, sensitivity sweeps, simulation studies, truth oracles,
//! and power surfaces from a JSON config plus CSV data, emitting JSON reports
//! and CSV tables.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use config::{
    BoundsConfig, EstimateConfig, PowerConfig, SensitivityConfig, SimulateConfig, TruthConfig,
};

#[derive(Parser)]
#[command(
    name = "stratvax",
    version,
    about = "Vaccine effects on post-infection outcomes within principal strata"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed (simulation commands and bootstrap).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's significance level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Report output path (overrides the config; default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Caps worker threads; never affects any computed value.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Point estimates, confidence intervals, and arm contrasts on a dataset.
    Estimate(Common),
    /// Partial-identification bounds, optionally covariate-adjusted and
    /// bootstrapped.
    Bounds(Common),
    /// Sensitivity sweep over the Immune/Protected outcome ratio.
    Sensitivity(Common),
    /// Replication study of estimator performance on synthetic trials.
    Simulate(Common),
    /// True parameter values of a synthetic-trial design.
    Truth(Common),
    /// Rejection-rate surface over a grid of stratum-level effects.
    Power(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Estimate(c)
            | Command::Bounds(c)
            | Command::Sensitivity(c)
            | Command::Simulate(c)
            | Command::Truth(c)
            | Command::Power(c) => c,
        }
    }
}

fn parse_config<T: DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn dispatch(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    if let Some(workers) = common.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .context("configuring worker pool")?;
    }
    let out = common.out.clone();
    match &cli.command {
        Command::Estimate(c) => {
            let mut cfg: EstimateConfig = parse_config(&c.config)?;
            if let Some(alpha) = c.alpha {
                cfg.alpha = alpha;
            }
            run::cmd_estimate(&cfg, out)?;
        }
        Command::Bounds(c) => {
            let mut cfg: BoundsConfig = parse_config(&c.config)?;
            if let Some(alpha) = c.alpha {
                cfg.alpha = alpha;
            }
            if let Some(seed) = c.seed {
                cfg.seed = Some(seed);
            }
            run::cmd_bounds(&cfg, out)?;
        }
        Command::Sensitivity(c) => {
            let mut cfg: SensitivityConfig = parse_config(&c.config)?;
            if let Some(alpha) = c.alpha {
                cfg.alpha = alpha;
            }
            run::cmd_sensitivity(&cfg, out)?;
        }
        Command::Simulate(c) => {
            let mut cfg: SimulateConfig = parse_config(&c.config)?;
            if let Some(alpha) = c.alpha {
                cfg.study.alpha = alpha;
            }
            if let Some(seed) = c.seed {
                cfg.study.dgp.seed = seed;
            }
            run::cmd_simulate(&cfg, out)?;
        }
        Command::Truth(c) => {
            let mut cfg: TruthConfig = parse_config(&c.config)?;
            if let Some(seed) = c.seed {
                cfg.seed = Some(seed);
            }
            run::cmd_truth(&cfg, out)?;
        }
        Command::Power(c) => {
            let mut cfg: PowerConfig = parse_config(&c.config)?;
            if let Some(alpha) = c.alpha {
                cfg.power.alpha = alpha;
            }
            if let Some(seed) = c.seed {
                cfg.power.seed = seed;
            }
            run::cmd_power(&cfg, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
