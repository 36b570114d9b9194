//! Command implementations. Every subcommand produces a [`RunReport`] that is
//! serialized as JSON (stdout or a file), plus optional CSV side tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use stratvax_core::bounds::{bounds_adjusted, bounds_bootstrap, bounds_unadjusted, BootstrapSpec};
use stratvax_core::dataset::{CsvSchema, TrialData};
use stratvax_core::functionals::{point_estimate, EstimandId, Method, PointEstimate};
use stratvax_core::nuisance::NuisanceSet;
use stratvax_core::onestep::{contrast, one_step, ContrastScale, EstimateReport};
use stratvax_core::report::Warning;
use stratvax_core::sensitivity::{default_grid, sensitivity_sweep};
use stratvax_core::simulation::{
    power_surface, run_study, truth_exact, truth_monte_carlo, PowerSurface, StudyEstimator,
    StudyResult, TruthRecord,
};
use stratvax_core::{BoundsReport, SensitivityCurve};

use crate::config::{
    BoundsConfig, EstimateConfig, PowerConfig, SensitivityConfig, SimulateConfig, TruthConfig,
    TruthMode,
};

/// Warning code for a bootstrap seeded from the clock rather than the config.
pub const TIME_SEEDED: &str = "TIME_SEEDED";

/// One elapsed-time entry, in milliseconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub phase: String,
    pub ms: u64,
}

/// The JSON artifact every subcommand emits: a version string, the effective
/// (defaults-filled) configuration, the payload, accumulated warnings with
/// stable codes, and wall-clock timings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimates: Option<Vec<EstimateReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<PointEstimate>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivityCurve>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power: Option<PowerSurface>,
    pub warnings: Vec<Warning>,
    pub timings: Vec<Timing>,
}

impl RunReport {
    fn new(command: &str, config: serde_json::Value) -> Self {
        RunReport {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            estimates: None,
            points: None,
            bounds: None,
            sensitivity: None,
            study: None,
            truth: None,
            power: None,
            warnings: Vec::new(),
            timings: Vec::new(),
        }
    }

    /// Serializes the report and writes it to `out` (or stdout when absent).
    pub fn emit(&self, out: Option<&Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        match out {
            Some(path) => fs::write(path, json.as_bytes())
                .with_context(|| format!("writing report to {}", path.display()))?,
            None => println!("{json}"),
        }
        Ok(())
    }
}

fn echo<T: Serialize>(config: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(config)?)
}

struct Stopwatch {
    start: Instant,
    last: Instant,
    timings: Vec<Timing>,
}

impl Stopwatch {
    fn new() -> Self {
        let now = Instant::now();
        Stopwatch {
            start: now,
            last: now,
            timings: Vec::new(),
        }
    }

    fn lap(&mut self, phase: &str) {
        let now = Instant::now();
        self.timings.push(Timing {
            phase: phase.to_string(),
            ms: now.duration_since(self.last).as_millis() as u64,
        });
        self.last = now;
    }

    fn finish(mut self) -> Vec<Timing> {
        let total = self.start.elapsed().as_millis() as u64;
        self.timings.push(Timing {
            phase: "total".into(),
            ms: total,
        });
        self.timings
    }
}

/// Loads a dataset, inferring the schema from the header when none is given:
/// columns named `z`, `s`, `y` play their namesake roles and every other
/// column is a covariate, in header order.
fn load_data(path: &Path, schema: &Option<CsvSchema>) -> Result<TrialData> {
    let schema = match schema {
        Some(s) => s.clone(),
        None => {
            let mut reader = csv::Reader::from_path(path)
                .with_context(|| format!("opening {}", path.display()))?;
            let headers = reader.headers().context("reading CSV header")?;
            let x: Vec<String> = headers
                .iter()
                .filter(|h| !matches!(*h, "z" | "s" | "y"))
                .map(str::to_string)
                .collect();
            CsvSchema {
                z: "z".into(),
                s: "s".into(),
                y: "y".into(),
                x,
            }
        }
    };
    Ok(TrialData::load_csv(path, &schema)?)
}

fn write_csv_file<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> stratvax_core::Result<()>,
{
    let mut buf = Vec::new();
    write(&mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing CSV to {}", path.display()))?;
    Ok(())
}

pub fn cmd_estimate(config: &EstimateConfig, out: Option<PathBuf>) -> Result<RunReport> {
    let mut report = RunReport::new("estimate", echo(config)?);
    let mut watch = Stopwatch::new();
    let data = load_data(&config.data, &config.schema)?;
    watch.lap("load");
    let nuis = NuisanceSet::fit(&data, &config.nuisance, config.known_propensity)?;
    report.warnings.extend(nuis.warnings.iter().cloned());
    watch.lap("fit");
    let estimands = config
        .estimands
        .clone()
        .unwrap_or_else(|| EstimandId::ALL.to_vec());
    match config.method {
        Method::Onestep => {
            let mut estimates = Vec::new();
            for &id in &estimands {
                let est = one_step(id, &data, &nuis, config.alpha)?;
                let treated_arm = matches!(
                    id,
                    EstimandId::Psi1Er
                        | EstimandId::Psi1Pi
                        | EstimandId::Psi1Both
                        | EstimandId::Eta1
                        | EstimandId::MarginalMu1
                );
                if config.contrasts && treated_arm {
                    let reference = StudyEstimator::reference(id);
                    {
                        let base = one_step(reference, &data, &nuis, config.alpha)?;
                        estimates.push(contrast(
                            &est,
                            &base,
                            ContrastScale::Additive,
                            config.alpha,
                        )?);
                        estimates.push(contrast(
                            &est,
                            &base,
                            ContrastScale::Multiplicative,
                            config.alpha,
                        )?);
                    }
                }
                estimates.push(est);
            }
            report.estimates = Some(estimates);
        }
        method => {
            let points: stratvax_core::Result<Vec<PointEstimate>> = estimands
                .iter()
                .map(|&id| point_estimate(id, &data, &nuis, method))
                .collect();
            report.points = Some(points?);
        }
    }
    watch.lap("estimate");
    report.timings = watch.finish();
    report.emit(out.or_else(|| config.out.clone()).as_deref())?;
    Ok(report)
}

pub fn cmd_bounds(config: &BoundsConfig, out: Option<PathBuf>) -> Result<RunReport> {
    let mut report = RunReport::new("bounds", echo(config)?);
    let mut watch = Stopwatch::new();
    let data = load_data(&config.data, &config.schema)?;
    watch.lap("load");
    let bounds = if config.bootstrap > 0 {
        let seed = match config.seed {
            Some(s) => s,
            None => {
                // Bounds are the one command where an unseeded run is
                // tolerated; record the seed actually used.
                let s = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_nanos() as u64)
                    .unwrap_or(0);
                report.warnings.push(Warning::new(
                    TIME_SEEDED,
                    format!("no seed configured; bootstrap used time-derived seed {s}"),
                ));
                s
            }
        };
        bounds_bootstrap(
            &data,
            &BootstrapSpec {
                replicates: config.bootstrap,
                seed,
                alpha: config.alpha,
                covariates: config.covariates.clone(),
            },
        )?
    } else if config.covariates.is_empty() {
        bounds_unadjusted(&data)?
    } else {
        bounds_adjusted(&data, &config.covariates)?
    };
    report.warnings.extend(bounds.warnings.iter().cloned());
    report.bounds = Some(bounds);
    watch.lap("bounds");
    report.timings = watch.finish();
    report.emit(out.or_else(|| config.out.clone()).as_deref())?;
    Ok(report)
}

pub fn cmd_sensitivity(config: &SensitivityConfig, out: Option<PathBuf>) -> Result<RunReport> {
    let mut report = RunReport::new("sensitivity", echo(config)?);
    let mut watch = Stopwatch::new();
    let data = load_data(&config.data, &config.schema)?;
    watch.lap("load");
    let nuis = NuisanceSet::fit(&data, &config.nuisance, config.known_propensity)?;
    report.warnings.extend(nuis.warnings.iter().cloned());
    watch.lap("fit");
    let bounds = bounds_unadjusted(&data)?;
    report.warnings.extend(bounds.warnings.iter().cloned());
    watch.lap("bounds");
    let grid = config.grid.clone().unwrap_or_else(default_grid);
    let curve = sensitivity_sweep(&data, &nuis, &grid, &bounds, config.alpha)?;
    report.warnings.extend(curve.warnings.iter().cloned());
    if let Some(path) = &config.out_csv {
        write_csv_file(path, |buf| curve.write_csv(buf))?;
    }
    report.sensitivity = Some(curve);
    report.bounds = Some(bounds);
    watch.lap("sweep");
    report.timings = watch.finish();
    report.emit(out.or_else(|| config.out.clone()).as_deref())?;
    Ok(report)
}

pub fn cmd_simulate(config: &SimulateConfig, out: Option<PathBuf>) -> Result<RunReport> {
    let mut report = RunReport::new("simulate", echo(config)?);
    let mut watch = Stopwatch::new();
    let result = run_study(&config.study)?;
    report.warnings.extend(result.warnings.iter().cloned());
    if let Some(path) = &config.out_csv {
        write_csv_file(path, |buf| result.write_csv(buf))?;
    }
    report.study = Some(result);
    watch.lap("study");
    report.timings = watch.finish();
    report.emit(out.or_else(|| config.out.clone()).as_deref())?;
    Ok(report)
}

pub fn cmd_truth(config: &TruthConfig, out: Option<PathBuf>) -> Result<RunReport> {
    let mut report = RunReport::new("truth", echo(config)?);
    let mut watch = Stopwatch::new();
    let truth = match config.mode {
        TruthMode::Exact => truth_exact(&config.design)?,
        TruthMode::MonteCarlo => {
            let seed = config
                .seed
                .ok_or_else(|| anyhow::anyhow!("monte_carlo truth mode requires a seed"))?;
            truth_monte_carlo(&config.design, config.draws, seed)?
        }
    };
    report.truth = Some(truth);
    watch.lap("truth");
    report.timings = watch.finish();
    report.emit(out.or_else(|| config.out.clone()).as_deref())?;
    Ok(report)
}

pub fn cmd_power(config: &PowerConfig, out: Option<PathBuf>) -> Result<RunReport> {
    let mut report = RunReport::new("power", echo(config)?);
    let mut watch = Stopwatch::new();
    let surface = power_surface(&config.power)?;
    if let Some(path) = &config.out_csv {
        write_csv_file(path, |buf| surface.write_csv(buf))?;
    }
    report.power = Some(surface);
    watch.lap("power");
    report.timings = watch.finish();
    report.emit(out.or_else(|| config.out.clone()).as_deref())?;
    Ok(report)
}
