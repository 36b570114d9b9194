//! JSON run configurations, one per subcommand. Unknown keys are rejected so
//! a typo cannot silently fall back to a default.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use stratvax_core::dataset::CsvSchema;
use stratvax_core::functionals::{EstimandId, Method};
use stratvax_core::nuisance::NuisanceConfig;
use stratvax_core::simulation::{PowerSpec, StudyDesign, StudySpec};

fn default_alpha() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

/// Configuration for the `estimate` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    /// CSV dataset path.
    pub data: PathBuf,
    /// Column-name mapping; when absent, columns `z`, `s`, `y` are used and
    /// every other column is treated as a covariate in header order.
    #[serde(default)]
    pub schema: Option<CsvSchema>,
    /// Estimands to run; defaults to all of them.
    #[serde(default)]
    pub estimands: Option<Vec<EstimandId>>,
    /// `plugin`, `ipw`, or `onestep` (default). Only the one-step method
    /// carries inference and contrasts.
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub nuisance: NuisanceConfig,
    /// Fixes the assignment probability instead of fitting it.
    #[serde(default)]
    pub known_propensity: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Also report additive and multiplicative contrasts of each treated-arm
    /// estimand against its untreated reference (one-step method only).
    #[serde(default = "default_true")]
    pub contrasts: bool,
    /// Report output path; stdout when absent.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_method() -> Method {
    Method::Onestep
}

/// Configuration for the `bounds` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub data: PathBuf,
    #[serde(default)]
    pub schema: Option<CsvSchema>,
    /// Covariate column indices for adjusted bounds; empty = unadjusted.
    #[serde(default)]
    pub covariates: Vec<usize>,
    /// Bootstrap replicates for endpoint confidence intervals; 0 skips the
    /// bootstrap.
    #[serde(default)]
    pub bootstrap: usize,
    /// Required when `bootstrap > 0` unless a time-derived seed is acceptable
    /// (it is then recorded in the report).
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// Configuration for the `sensitivity` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    pub data: PathBuf,
    #[serde(default)]
    pub schema: Option<CsvSchema>,
    /// Sensitivity-parameter grid; defaults to 0.25..=2.50 in steps of 0.05.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default = "default_monotone_nuisance")]
    pub nuisance: NuisanceConfig,
    #[serde(default)]
    pub known_propensity: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Optional CSV dump of the swept curve.
    #[serde(default)]
    pub out_csv: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// The sweep requires monotone infection-risk fits, so default to the joint
/// monotone model rather than separate per-arm fits.
fn default_monotone_nuisance() -> NuisanceConfig {
    NuisanceConfig {
        monotone_rho: true,
        ..NuisanceConfig::default()
    }
}

/// Configuration for the `simulate` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub study: StudySpec,
    /// Optional CSV dump of the per-estimator metrics.
    #[serde(default)]
    pub out_csv: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMode {
    Exact,
    MonteCarlo,
}

/// Configuration for the `truth` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub design: StudyDesign,
    #[serde(default = "default_truth_mode")]
    pub mode: TruthMode,
    /// Draws for Monte-Carlo mode.
    #[serde(default = "default_truth_draws")]
    pub draws: usize,
    /// Required in Monte-Carlo mode.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_truth_mode() -> TruthMode {
    TruthMode::Exact
}

fn default_truth_draws() -> usize {
    10_000_000
}

/// Configuration for the `power` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerConfig {
    pub power: PowerSpec,
    /// Optional long-format CSV of the surface (plot-ready).
    #[serde(default)]
    pub out_csv: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}
