//! Efficient gradients (influence functions), one-step bias correction, and
//! Wald inference.
//!
//! Every point-identified target here has the ratio form `ψ = A/B` with
//! `A = E[f(ν(X))]` for a smooth `f` of the conditional nuisances
//! `ν = (ρ₁, ρ₀, μ₁₁, μ₁₀, μ₀₁, μ₀₀, μ₁·, μ·₀)` and `B = E[ρ₀]` or `E[ρ₁]`.
//! The gradient of such an average is its tangent-space projection
//!
//! ```text
//! Φ_A(o) = f(ν(x)) − A
//!        + ∂f/∂ρ₁ · z/π₁(x) · (s − ρ₁(x))
//!        + ∂f/∂ρ₀ · (1−z)/π₀(x) · (s − ρ₀(x))
//!        + Σ_{z',s'} ∂f/∂μ_{z's'} · 1{z=z', s=s'}/P(Z=z',S=s'|x) · (y − μ_{z's'}(x))
//!        + ∂f/∂μ₁· · z/π₁(x) · (y − μ₁·(x))
//!        + ∂f/∂μ·₀ · (1−s)/P(S=0|x) · (y − μ·₀(x)),
//! ```
//!
//! combined by the quotient rule `Φ_ψ = (Φ_A − ψ Φ_B)/B`. Each closed form is
//! pinned by the pathwise-derivative property (`d/dt ψ(P_t) = E[Φ·score]`
//! along smooth submodels), which the acceptance tests verify by central
//! finite differences on a discrete fixture.
//!
//! The one-step estimator adds the empirical mean of the estimated gradient to
//! the plug-in: `ψ⁺ = ψ_n + n⁻¹ Σᵢ Φ_n(Oᵢ)`. Standard errors come from the
//! sample variance of the gradient values; ratio contrasts are delta-method on
//! the log scale.

use serde::{Deserialize, Serialize};

use crate::dataset::TrialData;
use crate::functionals::{plugin_value, EstimandId};
use crate::nuisance::NuisanceSet;
use crate::{Error, Result};

/// Identifier of an efficient gradient. `Phi1Eps` is the sensitivity-family
/// gradient, parameterized by the Immune/Protected outcome ratio `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientId {
    Phi0,
    Phi1Er,
    Phi1Pi,
    Phi1Both,
    Theta0,
    Theta1,
    Phi1Eps(f64),
}

impl GradientId {
    /// The estimand whose one-step this gradient serves (`None` for the
    /// ε-family, which lives in the sensitivity module).
    pub fn estimand(self) -> Option<EstimandId> {
        match self {
            GradientId::Phi0 => Some(EstimandId::Psi0),
            GradientId::Phi1Er => Some(EstimandId::Psi1Er),
            GradientId::Phi1Pi => Some(EstimandId::Psi1Pi),
            GradientId::Phi1Both => Some(EstimandId::Psi1Both),
            GradientId::Theta0 => Some(EstimandId::Eta0),
            GradientId::Theta1 => Some(EstimandId::Eta1),
            GradientId::Phi1Eps(_) => None,
        }
    }
}

/// Kahan-compensated sum; reduction-order differences stay at the level of a
/// single rounding error, keeping results stable across parallel splits.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

pub fn kahan_mean(values: &[f64]) -> f64 {
    kahan_sum(values.iter().copied()) / values.len() as f64
}

/// Mean-centered sample variance (divisor `n`, matching the asymptotic
/// variance prescription; no degrees-of-freedom adjustment).
pub fn sample_variance(values: &[f64]) -> f64 {
    let m = kahan_mean(values);
    kahan_sum(values.iter().map(|v| (v - m) * (v - m))) / values.len() as f64
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile (Acklam's rational approximation polished by one
/// Newton step against the CDF above).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(0.0 < p && p < 1.0, "quantile requires p in (0,1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let x = if p < 0.02425 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 0.97575 {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // One Newton step: x ← x − (Φ(x) − p)/φ(x).
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    x - (normal_cdf(x) - p) / pdf
}

/// Partial derivatives of the numerator integrand `f(ν(x))` at one sample
/// point, plus its value. Unused channels stay at zero.
#[derive(Debug, Default, Clone, Copy)]
struct Partials {
    f: f64,
    d_rho0: f64,
    d_rho1: f64,
    d_mu: [[f64; 2]; 2],
    d_mu1dot: f64,
    d_mudot0: f64,
}

/// Which marginal forms the denominator of the ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Denominator {
    Rho0Bar,
    Rho1Bar,
}

fn numerator_partials(id: GradientId, nuis: &NuisanceSet, i: usize) -> Result<Partials> {
    let r0 = nuis.rho0[i];
    let r1 = nuis.rho1[i];
    let mut p = Partials::default();
    match id {
        GradientId::Phi0 => {
            p.f = r0 * nuis.mu[0][1][i];
            p.d_rho0 = nuis.mu[0][1][i];
            p.d_mu[0][1] = r0;
        }
        GradientId::Phi1Er => {
            let m00 = nuis.mu[0][0][i];
            p.f = nuis.mu1dot[i] - (1.0 - r0) * m00;
            p.d_rho0 = m00;
            p.d_mu[0][0] = -(1.0 - r0);
            p.d_mu1dot = 1.0;
        }
        GradientId::Phi1Pi => {
            let (m11, m10) = (nuis.mu[1][1][i], nuis.mu[1][0][i]);
            p.f = r1 * m11 + (r0 - r1) * m10;
            p.d_rho1 = m11 - m10;
            p.d_rho0 = m10;
            p.d_mu[1][1] = r1;
            p.d_mu[1][0] = r0 - r1;
        }
        GradientId::Phi1Both => {
            let (m11, md0) = (nuis.mu[1][1][i], nuis.mudot0[i]);
            p.f = r1 * m11 + (r0 - r1) * md0;
            p.d_rho1 = m11 - md0;
            p.d_rho0 = md0;
            p.d_mu[1][1] = r1;
            p.d_mudot0 = r0 - r1;
        }
        GradientId::Theta0 => {
            p.f = r1 * nuis.mu[0][1][i];
            p.d_rho1 = nuis.mu[0][1][i];
            p.d_mu[0][1] = r1;
        }
        GradientId::Theta1 => {
            p.f = r1 * nuis.mu[1][1][i];
            p.d_rho1 = nuis.mu[1][1][i];
            p.d_mu[1][1] = r1;
        }
        GradientId::Phi1Eps(eps) => {
            let (m11, m10) = (nuis.mu[1][1][i], nuis.mu[1][0][i]);
            // Protected weight g = (ρ₀−ρ₁)(1−ρ₁)/d with d = (1−ε)ρ₀ − ρ₁ + ε;
            // ε = 1 collapses to d = 1−ρ₁ and recovers the PI gradient.
            let d = (1.0 - eps) * r0 - r1 + eps;
            if d.abs() < 1e-8 {
                return Err(Error::SensitivityDenominator {
                    row: i,
                    epsilon: eps,
                    value: d,
                });
            }
            let g = (r0 - r1) * (1.0 - r1) / d;
            let dg_dr0 = eps * (1.0 - r1) * (1.0 - r1) / (d * d);
            let dg_dr1 =
                ((-(1.0 - r1) - (r0 - r1)) * d + (r0 - r1) * (1.0 - r1)) / (d * d);
            p.f = r1 * m11 + g * m10;
            p.d_rho0 = m10 * dg_dr0;
            p.d_rho1 = m11 + m10 * dg_dr1;
            p.d_mu[1][1] = r1;
            p.d_mu[1][0] = g;
        }
    }
    Ok(p)
}

fn denominator_for(id: GradientId) -> Denominator {
    match id {
        GradientId::Theta0 | GradientId::Theta1 => Denominator::Rho1Bar,
        _ => Denominator::Rho0Bar,
    }
}

/// Projects the numerator partials onto the observed-data tangent space at
/// observation `i` and applies the quotient rule.
fn project(
    id: GradientId,
    data: &TrialData,
    nuis: &NuisanceSet,
    i: usize,
    a: f64,
    b: f64,
    psi: f64,
) -> Result<f64> {
    let o = &data.observations()[i];
    let p = numerator_partials(id, nuis, i)?;
    let pi1 = nuis.clamp(nuis.pi1[i]);
    let pi0 = nuis.clamp(1.0 - nuis.pi1[i]);
    let (z, s, y) = (o.z as f64, o.s as f64, o.y);
    let r0 = nuis.rho0[i];
    let r1 = nuis.rho1[i];

    let mut phi_a = p.f - a;
    if p.d_rho1 != 0.0 {
        phi_a += p.d_rho1 * z / pi1 * (s - r1);
    }
    if p.d_rho0 != 0.0 {
        phi_a += p.d_rho0 * (1.0 - z) / pi0 * (s - r0);
    }
    for zz in 0..2usize {
        for ss in 0..2usize {
            let d = p.d_mu[zz][ss];
            if d == 0.0 || o.z as usize != zz || o.s as usize != ss {
                continue;
            }
            let pi_z = if zz == 1 { pi1 } else { pi0 };
            let rho_z = if zz == 1 { r1 } else { r0 };
            let p_s = if ss == 1 { rho_z } else { 1.0 - rho_z };
            let cell = nuis.clamp(p_s) * pi_z;
            phi_a += d * (y - nuis.mu[zz][ss][i]) / cell;
        }
    }
    if p.d_mu1dot != 0.0 {
        phi_a += p.d_mu1dot * z / pi1 * (y - nuis.mu1dot[i]);
    }
    if p.d_mudot0 != 0.0 && o.s == 0 {
        let p_s0 = nuis.clamp(pi1 * (1.0 - r1) + pi0 * (1.0 - r0));
        phi_a += p.d_mudot0 * (y - nuis.mudot0[i]) / p_s0;
    }

    let phi_b = match denominator_for(id) {
        Denominator::Rho0Bar => r0 - b + (1.0 - z) / pi0 * (s - r0),
        Denominator::Rho1Bar => r1 - b + z / pi1 * (s - r1),
    };
    Ok((phi_a - psi * phi_b) / b)
}

/// Plug-in values `(A, B, ψ)` for a gradient id.
fn plugin_triple(id: GradientId, nuis: &NuisanceSet) -> Result<(f64, f64, f64)> {
    let n = nuis.n() as f64;
    let num = |f: &dyn Fn(usize) -> Result<f64>| -> Result<f64> {
        let mut acc = 0.0;
        for i in 0..nuis.n() {
            acc += f(i)?;
        }
        Ok(acc / n)
    };
    let a = num(&|i| numerator_partials(id, nuis, i).map(|p| p.f))?;
    let b = match denominator_for(id) {
        Denominator::Rho0Bar => nuis.rb0,
        Denominator::Rho1Bar => nuis.rb1,
    };
    if b.abs() < crate::functionals::DENOMINATOR_GUARD {
        return Err(Error::DegenerateDenominator {
            estimand: format!("{id:?}"),
            denominator: "stratum mass".into(),
            value: b,
        });
    }
    Ok((a, b, a / b))
}

/// Per-observation values of the estimated gradient, centered at the plug-in.
pub fn influence_values(
    id: GradientId,
    data: &TrialData,
    nuis: &NuisanceSet,
) -> Result<Vec<f64>> {
    let (a, b, psi) = plugin_triple(id, nuis)?;
    (0..data.n())
        .map(|i| project(id, data, nuis, i, a, b, psi))
        .collect()
}

/// The estimated gradient at a single observation (index `i` of the fitting
/// data), given the current plug-in functional values.
pub fn gradient(
    id: GradientId,
    data: &TrialData,
    nuis: &NuisanceSet,
    i: usize,
) -> Result<f64> {
    let (a, b, psi) = plugin_triple(id, nuis)?;
    project(id, data, nuis, i, a, b, psi)
}

/// Influence function of the marginal arm mean `E[μ_z·(X)]`:
/// `μ_z· − ψ + 1{Z=z}/π_z (Y − μ_z·)`.
fn marginal_influence(data: &TrialData, nuis: &NuisanceSet, arm: u8) -> Vec<f64> {
    let mu: &[f64] = if arm == 1 { &nuis.mu1dot } else { &nuis.mu0dot };
    let psi = kahan_mean(mu);
    data.observations()
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let pi_z = if arm == 1 {
                nuis.clamp(nuis.pi1[i])
            } else {
                nuis.clamp(1.0 - nuis.pi1[i])
            };
            let ind = (o.z == arm) as u8 as f64;
            mu[i] - psi + ind / pi_z * (o.y - mu[i])
        })
        .collect()
}

/// A one-step estimate with influence-function-based Wald inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    /// Estimand name, or a contrast label like `"psi1_pi - psi0"`.
    pub target: String,
    pub method: String,
    pub point: f64,
    pub se: f64,
    pub alpha: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_value: f64,
    /// For multiplicative contrasts: inference carried out on the log scale.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_scale: Option<LogScaleReport>,
    pub n: usize,
    /// Per-observation influence values, retained for forming contrasts.
    #[serde(skip)]
    pub influence: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogScaleReport {
    pub point: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

fn wald(target: String, point: f64, influence: Vec<f64>, alpha: f64) -> EstimateReport {
    let n = influence.len();
    let se = (sample_variance(&influence) / n as f64).sqrt();
    let zq = normal_quantile(1.0 - alpha / 2.0);
    let zstat = if se > 0.0 { point / se } else { f64::INFINITY };
    EstimateReport {
        target,
        method: "onestep".into(),
        point,
        se,
        alpha,
        ci_lower: point - zq * se,
        ci_upper: point + zq * se,
        p_value: 2.0 * normal_cdf(-zstat.abs()),
        log_scale: None,
        n,
        influence,
    }
}

/// One-step estimator: plug-in plus the mean estimated gradient, with Wald
/// inference from the gradient's sample variance.
pub fn one_step(
    estimand: EstimandId,
    data: &TrialData,
    nuis: &NuisanceSet,
    alpha: f64,
) -> Result<EstimateReport> {
    let (plugin, influence) = match estimand {
        EstimandId::MarginalMu1 => (
            plugin_value(estimand, nuis)?,
            marginal_influence(data, nuis, 1),
        ),
        EstimandId::MarginalMu0 => (
            plugin_value(estimand, nuis)?,
            marginal_influence(data, nuis, 0),
        ),
        _ => {
            let id = match estimand {
                EstimandId::Psi0 => GradientId::Phi0,
                EstimandId::Psi1Er => GradientId::Phi1Er,
                EstimandId::Psi1Pi => GradientId::Phi1Pi,
                EstimandId::Psi1Both => GradientId::Phi1Both,
                EstimandId::Eta0 => GradientId::Theta0,
                EstimandId::Eta1 => GradientId::Theta1,
                _ => unreachable!(),
            };
            (plugin_value(estimand, nuis)?, influence_values(id, data, nuis)?)
        }
    };
    let point = plugin + kahan_mean(&influence);
    Ok(wald(estimand.name().to_string(), point, influence, alpha))
}

/// One-step estimator for the sensitivity family member at `ε`, sharing the
/// Wald machinery (used by the sensitivity sweep).
pub fn one_step_eps(
    eps: f64,
    data: &TrialData,
    nuis: &NuisanceSet,
    alpha: f64,
) -> Result<EstimateReport> {
    let id = GradientId::Phi1Eps(eps);
    let (_, _, psi) = plugin_triple(id, nuis)?;
    let influence = influence_values(id, data, nuis)?;
    let point = psi + kahan_mean(&influence);
    Ok(wald(format!("psi1_eps({eps})"), point, influence, alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastScale {
    Additive,
    Multiplicative,
}

/// Contrast of two one-step reports computed on the same data (their
/// influence vectors must be aligned row by row).
///
/// Additive: point difference, influence `Φ₁ − Φ₀`. Multiplicative: the ratio,
/// with delta-method inference on the log scale (influence
/// `Φ₁/ψ₁ − Φ₀/ψ₀`); ratio-scale CI endpoints are the exponentiated log-scale
/// endpoints exactly.
pub fn contrast(
    e1: &EstimateReport,
    e0: &EstimateReport,
    scale: ContrastScale,
    alpha: f64,
) -> Result<EstimateReport> {
    if e1.influence.len() != e0.influence.len() {
        return Err(Error::DimensionMismatch {
            expected: e1.influence.len(),
            got: e0.influence.len(),
        });
    }
    match scale {
        ContrastScale::Additive => {
            let influence: Vec<f64> = e1
                .influence
                .iter()
                .zip(&e0.influence)
                .map(|(a, b)| a - b)
                .collect();
            Ok(wald(
                format!("{} - {}", e1.target, e0.target),
                e1.point - e0.point,
                influence,
                alpha,
            ))
        }
        ContrastScale::Multiplicative => {
            if e0.point <= 0.0 || e1.point <= 0.0 {
                return Err(Error::Config(format!(
                    "multiplicative contrast requires positive points, got {} / {}",
                    e1.point, e0.point
                )));
            }
            let influence: Vec<f64> = e1
                .influence
                .iter()
                .zip(&e0.influence)
                .map(|(a, b)| a / e1.point - b / e0.point)
                .collect();
            let n = influence.len();
            let log_point = (e1.point / e0.point).ln();
            let log_se = (sample_variance(&influence) / n as f64).sqrt();
            let zq = normal_quantile(1.0 - alpha / 2.0);
            let (log_lo, log_hi) = (log_point - zq * log_se, log_point + zq * log_se);
            let zstat = if log_se > 0.0 {
                log_point / log_se
            } else {
                f64::INFINITY
            };
            let ratio = e1.point / e0.point;
            Ok(EstimateReport {
                target: format!("{} / {}", e1.target, e0.target),
                method: "onestep".into(),
                point: ratio,
                se: ratio * log_se,
                alpha,
                ci_lower: log_lo.exp(),
                ci_upper: log_hi.exp(),
                p_value: 2.0 * normal_cdf(-zstat.abs()),
                log_scale: Some(LogScaleReport {
                    point: log_point,
                    se: log_se,
                    ci_lower: log_lo,
                    ci_upper: log_hi,
                }),
                n,
                influence,
            })
        }
    }
}
