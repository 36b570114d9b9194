//! Sensitivity analysis for partial principal ignorability.
//!
//! The family is indexed by `ε = E{Y(1)|Immune, X}/E{Y(1)|Protected, X}`, the
//! ratio of treated outcome levels between the Immune and Protected strata
//! among the uninfected. At `ε = 1` the two strata share one outcome level and
//! the family collapses to the point-identified `ψ₁,PI`. For general `ε` the
//! treated Naturally-Infected mean is
//!
//! ```text
//! ψ₁,ε = E[ ρ₁ μ₁₁ + g_ε · μ₁₀ ](X) / ρ̄₀,
//! g_ε  = (ρ₀ − ρ₁)(1 − ρ₁) / d_ε,   d_ε = (1−ε) ρ₀ − ρ₁ + ε,
//! ```
//!
//! whose denominator `d_ε` can vanish when fitted infection risks violate
//! monotonicity — hence this module requires nuisances fitted with the
//! monotone option. The sweep evaluates the one-step estimator over a grid of
//! `ε` values and brackets where the point estimate crosses the
//! partial-identification bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::BoundsReport;
use crate::dataset::TrialData;
use crate::functionals::EstimandId;
use crate::nuisance::NuisanceSet;
use crate::onestep::{influence_values, kahan_mean, one_step, one_step_eps, EstimateReport, GradientId};
use crate::report::Warning;
use crate::{Error, Result};

/// Default sweep grid: 0.25 to 2.5 in steps of 0.05.
pub fn default_grid() -> Vec<f64> {
    (5..=50).map(|k| k as f64 * 0.05).collect()
}

fn require_monotone(nuis: &NuisanceSet) -> Result<()> {
    if let Some(i) = (0..nuis.n()).find(|&i| nuis.rho1[i] > nuis.rho0[i]) {
        return Err(Error::Config(format!(
            "sensitivity analysis requires monotone infection-risk fits \
             (rho1 {:.4} > rho0 {:.4} at row {i}); refit with the monotone option",
            nuis.rho1[i], nuis.rho0[i]
        )));
    }
    Ok(())
}

/// One member of the sensitivity family.
///
/// `method` plugin skips the one-step correction but keeps influence-based
/// standard errors; onestep applies the correction.
pub fn psi1_eps(
    data: &TrialData,
    nuis: &NuisanceSet,
    eps: f64,
    correct: bool,
    alpha: f64,
) -> Result<EstimateReport> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    require_monotone(nuis)?;
    let mut report = one_step_eps(eps, data, nuis, alpha)?;
    if !correct {
        let shift = kahan_mean(&report.influence);
        report.point -= shift;
        report.ci_lower -= shift;
        report.ci_upper -= shift;
        report.method = "plugin".into();
    }
    Ok(report)
}

/// Influence values for the ε-family member (exposed for variance work).
pub fn eps_influence(data: &TrialData, nuis: &NuisanceSet, eps: f64) -> Result<Vec<f64>> {
    require_monotone(nuis)?;
    influence_values(GradientId::Phi1Eps(eps), data, nuis)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// `ψ₁,ε − ψ₀` and `ψ₁,ε / ψ₀` against the one-step `ψ₀` on the same data.
    pub effect_additive: f64,
    pub effect_multiplicative: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub points: Vec<CurvePoint>,
    /// Grid values whose evaluation failed, with the error text.
    pub failed: Vec<(f64, String)>,
    /// Bound endpoints the breakpoints refer to.
    pub bound_lower: f64,
    pub bound_upper: f64,
    /// Grid-bracketing intervals `(ε_left, ε_right)` where the point estimate
    /// crosses the lower / upper bound, in grid order. Breakpoints are
    /// reported as intervals rather than root-polished scalars: the curve is
    /// an estimate, and sub-grid precision would be spurious.
    pub crossings_lower: Vec<(f64, f64)>,
    pub crossings_upper: Vec<(f64, f64)>,
    pub warnings: Vec<Warning>,
}

impl SensitivityCurve {
    /// The ψ₁,PI-equivalent member, if the grid contains ε = 1.
    pub fn at_unity(&self) -> Option<&CurvePoint> {
        self.points
            .iter()
            .find(|p| (p.epsilon - 1.0).abs() < 1e-12)
    }

    /// Writes the curve as CSV with the columns
    /// `epsilon,estimate,se,ci_lo,ci_hi,effect_additive,effect_multiplicative`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "epsilon",
            "estimate",
            "se",
            "ci_lo",
            "ci_hi",
            "effect_additive",
            "effect_multiplicative",
        ])
        .map_err(csv_err)?;
        for p in &self.points {
            w.write_record([
                p.epsilon.to_string(),
                p.estimate.to_string(),
                p.se.to_string(),
                p.ci_lower.to_string(),
                p.ci_upper.to_string(),
                p.effect_additive.to_string(),
                p.effect_multiplicative.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<csv writer>".into(),
            source: e,
        })?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv {
        location: "sensitivity curve".into(),
        message: e.to_string(),
    }
}

fn bracket_crossings(points: &[CurvePoint], level: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for w in points.windows(2) {
        let (a, b) = (w[0].estimate - level, w[1].estimate - level);
        if a == 0.0 || a * b < 0.0 {
            out.push((w[0].epsilon, w[1].epsilon));
        }
    }
    if let Some(last) = points.last() {
        if last.estimate == level {
            out.push((last.epsilon, last.epsilon));
        }
    }
    out
}

/// Sweeps the one-step ε-family estimator over a grid and locates where the
/// point estimate crosses the partial-identification bounds.
pub fn sensitivity_sweep(
    data: &TrialData,
    nuis: &NuisanceSet,
    grid: &[f64],
    bounds: &BoundsReport,
    alpha: f64,
) -> Result<SensitivityCurve> {
    if grid.is_empty() {
        return Err(Error::Config("sensitivity grid is empty".into()));
    }
    require_monotone(nuis)?;
    let psi0 = one_step(EstimandId::Psi0, data, nuis, alpha)?;
    let evaluated: Vec<(f64, std::result::Result<EstimateReport, String>)> = grid
        .par_iter()
        .map(|&eps| {
            (
                eps,
                psi1_eps(data, nuis, eps, true, alpha).map_err(|e| e.to_string()),
            )
        })
        .collect();
    let mut points = Vec::new();
    let mut failed = Vec::new();
    for (eps, result) in evaluated {
        match result {
            Ok(r) => points.push(CurvePoint {
                epsilon: eps,
                estimate: r.point,
                se: r.se,
                ci_lower: r.ci_lower,
                ci_upper: r.ci_upper,
                effect_additive: r.point - psi0.point,
                effect_multiplicative: r.point / psi0.point,
            }),
            Err(message) => failed.push((eps, message)),
        }
    }
    points.sort_by(|a, b| a.epsilon.partial_cmp(&b.epsilon).unwrap());
    let crossings_lower = bracket_crossings(&points, bounds.lower);
    let crossings_upper = bracket_crossings(&points, bounds.upper);
    Ok(SensitivityCurve {
        points,
        failed,
        bound_lower: bounds.lower,
        bound_upper: bounds.upper,
        crossings_lower,
        crossings_upper,
        warnings: Vec::new(),
    })
}
