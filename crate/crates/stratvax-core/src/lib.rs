//! Estimation of vaccine effects on post-infection outcomes within principal strata.
//!
//! A trial records, for each participant, covariates `X`, a vaccine arm `Z`, an
//! infection indicator `S`, and a post-infection outcome `Y`. Participants are
//! classified by their joint potential infection status `(S(0), S(1))`:
//!
//! * **Doomed** `(1,1)` — infected regardless of vaccination,
//! * **Protected** `(1,0)` — infected only without the vaccine,
//! * **Immune** `(0,0)` — never infected,
//!
//! with monotonicity (`S(1) ≤ S(0)`) ruling out the fourth cell. The *Naturally
//! Infected* stratum is the union of Doomed and Protected (`S(0) = 1`): the
//! people who would become infected absent vaccination, and hence the people in
//! whom a vaccine effect on the post-infection outcome is meaningful.
//!
//! This crate provides:
//!
//! * [`dataset`] — validated trial data and empirical cell statistics;
//! * [`nuisance`] — conditional working models (propensity, infection risk,
//!   outcome regressions) fitted by IRLS logistic regression or saturated cell
//!   means, with plug-in marginalization;
//! * [`functionals`] — identifying functionals for stratum means and masses,
//!   with plug-in and inverse-probability-weighted estimators;
//! * [`onestep`] — efficient gradients (influence functions), one-step bias
//!   corrections, and Wald inference for additive and multiplicative contrasts;
//! * [`bounds`] — nonparametric partial-identification bounds via trimmed
//!   means, covariate adjustment, and bootstrap confidence intervals;
//! * [`sensitivity`] — a one-parameter sensitivity family indexed by the
//!   Immune/Protected outcome ratio `ε`, with sweeps and bound breakpoints;
//! * [`simulation`] — the two data-generating processes used to validate the
//!   estimators, exact/Monte-Carlo truth oracles, replication studies, and
//!   power surfaces.

pub mod bounds;
pub mod dataset;
pub mod functionals;
pub mod nuisance;
pub mod onestep;
pub mod report;
pub mod sensitivity;
pub mod simulation;
#[cfg(test)]
pub(crate) mod testutil;

pub use bounds::BoundsReport;
pub use dataset::{CellStats, Observation, TrialData};
pub use functionals::{EstimandId, PointEstimate};
pub use nuisance::{FittedModel, NuisanceSet, RegressionSpec};
pub use onestep::{EstimateReport, GradientId};
pub use report::Warning;
pub use sensitivity::SensitivityCurve;
pub use simulation::{DgpSpec, StudyResult, TruthRecord};

/// Crate-wide error type. Every failure names the offending input so batch
/// pipelines can report precisely what went wrong.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error at {location}: {message}")]
    Csv { location: String, message: String },
    #[error("missing column {name:?} in csv header")]
    MissingColumn { name: String },
    #[error("row {row}, column {column:?}: {message}")]
    BadCell {
        row: usize,
        column: String,
        message: String,
    },
    #[error("dataset is empty")]
    EmptyData,
    #[error("positivity violated: no rows with S=1 in arm Z={arm}")]
    Positivity { arm: u8 },
    #[error("covariate dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty subset fitting nuisance {name}")]
    EmptySubset { name: String },
    #[error("design matrix rank-deficient fitting {name} (column {column})")]
    RankDeficient { name: String, column: usize },
    #[error("nuisance {name} required by {needed_by} has an empty (z,s) cell")]
    EmptyCell { name: String, needed_by: String },
    #[error("estimand {estimand}: denominator {denominator} is degenerate ({value:.3e})")]
    DegenerateDenominator {
        estimand: String,
        denominator: String,
        value: f64,
    },
    #[error("sensitivity denominator (1-ε)ρ₀(x)-ρ₁(x)+ε ≈ {value:.3e} at sample point {row} for ε={epsilon}")]
    SensitivityDenominator { row: usize, epsilon: f64, value: f64 },
    #[error("bounds require a non-empty (Z=1,S=0) cell when the trimming fraction is positive")]
    EmptyTrimCell,
    #[error("exact truth computation is only available for the discrete-covariate study")]
    ExactTruthUnsupported,
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
