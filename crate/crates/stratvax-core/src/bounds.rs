//! Partial-identification bounds for the treated mean in the Naturally
//! Infected stratum, `E{Y(1)|S(0)=1}`, and the corresponding effect bounds.
//!
//! The vaccinated uninfected are a mixture of Immune and Protected; the
//! Protected fraction of that cell is `q = (ρ̄₀−ρ̄₁)/(1−ρ̄₁)`. Bounding the
//! Protected outcome level by the mean of the `q`-lowest (resp. `q`-highest)
//! outcomes among the vaccinated uninfected yields
//!
//! ```text
//! ℓ = μ̄₁₁ ρ̄₁/ρ̄₀ + μ̄₁₀,ℓ (1 − ρ̄₁/ρ̄₀),
//! u = μ̄₁₁ ρ̄₁/ρ̄₀ + μ̄₁₀,u (1 − ρ̄₁/ρ̄₀),
//! ```
//!
//! with `μ̄₁₀,ℓ` / `μ̄₁₀,u` the extreme trimmed means. With any ties among the
//! cell outcomes (always, for binary outcomes), the tie-aware recipe averages
//! the `n* = ⌈q·n₁₀⌉` smallest (largest) values; the continuous-outcome recipe
//! trims strictly below/above the empirical `q`-th and `(1−q)`-th quantiles.
//!
//! Covariate adjustment applies the same recipe within each covariate cell and
//! averages the per-cell bounds over the empirical covariate distribution.
//! Confidence intervals come from the nonparametric bootstrap (percentile
//! flavor), with resampling streams indexed by replicate so results do not
//! depend on the worker count.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Observation, TrialData};
use crate::report::{codes, Warning};
use crate::{Error, Result};

/// Bootstrap replicates hitting an empty required cell are redrawn up to this
/// many times before being recorded as failed.
pub const BOOTSTRAP_RETRY_CAP: usize = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsReport {
    /// Lower and upper bounds on `E{Y(1)|S(0)=1}` (clamped so `lower ≤ upper`).
    pub lower: f64,
    pub upper: f64,
    /// Protected fraction of the vaccinated-uninfected cell, clamped to [0,1].
    pub trimming_fraction: f64,
    /// Extreme trimmed means of the vaccinated-uninfected outcomes
    /// (`None` when the trimming fraction is zero).
    pub trimmed_mean_lower: Option<f64>,
    pub trimmed_mean_upper: Option<f64>,
    /// Untreated reference mean used for the effect-scale bounds.
    pub psi0_reference: f64,
    /// `[lower−ψ₀, upper−ψ₀]`.
    pub effect_additive: (f64, f64),
    /// `[lower/ψ₀, upper/ψ₀]` (absent when ψ₀ is too close to zero).
    pub effect_multiplicative: Option<(f64, f64)>,
    /// Percentile bootstrap CIs for the lower and upper bound (absent without
    /// bootstrap replicates).
    pub ci_lower: Option<(f64, f64)>,
    pub ci_upper: Option<(f64, f64)>,
    /// Covariate columns used for adjustment; empty means unadjusted.
    pub adjustment_covariates: Vec<usize>,
    pub bootstrap_replicates: usize,
    pub failed_replicates: usize,
    pub warnings: Vec<Warning>,
}

/// Inverse-CDF (type-1) empirical quantile of sorted values.
fn type1_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Raw per-cell summary needed by the bound recipe.
struct CellSummary {
    rho0: f64,
    rho1: f64,
    mu11: f64,
    mu01: f64,
    /// Sorted outcomes of the vaccinated uninfected.
    y10: Vec<f64>,
}

fn summarize<'a>(rows: impl Iterator<Item = &'a Observation>) -> Option<CellSummary> {
    let mut n = [[0usize; 2]; 2];
    let mut sum = [[0.0f64; 2]; 2];
    let mut y10 = Vec::new();
    for o in rows {
        n[o.z as usize][o.s as usize] += 1;
        sum[o.z as usize][o.s as usize] += o.y;
        if o.z == 1 && o.s == 0 {
            y10.push(o.y);
        }
    }
    let n0 = n[0][0] + n[0][1];
    let n1 = n[1][0] + n[1][1];
    if n0 == 0 || n1 == 0 || n[1][1] == 0 || n[0][1] == 0 {
        return None;
    }
    y10.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(CellSummary {
        rho0: n[0][1] as f64 / n0 as f64,
        rho1: n[1][1] as f64 / n1 as f64,
        mu11: sum[1][1] / n[1][1] as f64,
        mu01: sum[0][1] / n[0][1] as f64,
        y10,
    })
}

/// Bounds within one cell (or the whole sample). Returns
/// `(lower, upper, q, trimmed_lower, trimmed_upper)`.
fn cell_bounds(
    c: &CellSummary,
    warnings: &mut Vec<Warning>,
) -> Result<(f64, f64, f64, Option<f64>, Option<f64>)> {
    let raw_q = (c.rho0 - c.rho1) / (1.0 - c.rho1);
    let q = if raw_q < 0.0 {
        warnings.push(Warning::new(
            codes::TRIM_CLAMP,
            format!("trimming fraction {raw_q:.4} clamped to 0 (empirical monotonicity violation)"),
        ));
        0.0
    } else if raw_q > 1.0 {
        warnings.push(Warning::new(
            codes::TRIM_CLAMP,
            format!("trimming fraction {raw_q:.4} clamped to 1"),
        ));
        1.0
    } else {
        raw_q
    };
    let anchor = c.mu11 * c.rho1 / c.rho0;
    if q == 0.0 {
        return Ok((anchor, anchor, q, None, None));
    }
    if c.y10.is_empty() {
        return Err(Error::EmptyTrimCell);
    }
    let n10 = c.y10.len();
    let has_ties = c.y10.windows(2).any(|w| w[0] == w[1]);
    let tie_aware = |q: f64| -> (f64, f64) {
        let n_star = ((q * n10 as f64).ceil() as usize).clamp(1, n10);
        let lo = c.y10[..n_star].iter().sum::<f64>() / n_star as f64;
        let hi = c.y10[n10 - n_star..].iter().sum::<f64>() / n_star as f64;
        (lo, hi)
    };
    let (t_lo, t_hi) = if has_ties {
        tie_aware(q)
    } else {
        // Continuous-outcome recipe: strict trimming at the q-th and (1−q)-th
        // empirical quantiles, falling back to the tie-aware averages if the
        // strict sets are empty.
        let y_l = type1_quantile(&c.y10, q);
        let y_u = type1_quantile(&c.y10, 1.0 - q);
        let lo: Vec<f64> = c.y10.iter().copied().filter(|&y| y < y_l).collect();
        let hi: Vec<f64> = c.y10.iter().copied().filter(|&y| y > y_u).collect();
        if lo.is_empty() || hi.is_empty() {
            tie_aware(q)
        } else {
            (
                lo.iter().sum::<f64>() / lo.len() as f64,
                hi.iter().sum::<f64>() / hi.len() as f64,
            )
        }
    };
    let weight = 1.0 - c.rho1 / c.rho0;
    let mut lower = anchor + t_lo * weight;
    let mut upper = anchor + t_hi * weight;
    if lower > upper {
        // Only possible through floating-point noise at q → 0; keep ordered.
        std::mem::swap(&mut lower, &mut upper);
    }
    Ok((lower, upper, q, Some(t_lo), Some(t_hi)))
}

fn assemble(
    data: &TrialData,
    covariates: &[usize],
) -> Result<(f64, f64, f64, Option<f64>, Option<f64>, f64, Vec<Warning>)> {
    let mut warnings = Vec::new();
    if covariates.is_empty() {
        let c = summarize(data.observations().iter()).ok_or(Error::EmptyData)?;
        let (lower, upper, q, t_lo, t_hi) = cell_bounds(&c, &mut warnings)?;
        return Ok((lower, upper, q, t_lo, t_hi, c.mu01, warnings));
    }
    // Covariate adjustment: per-cell recipe averaged over the empirical
    // covariate distribution; the ψ₀ reference is the matching
    // covariate-weighted untreated infected mean.
    let cells = data.covariate_cells(covariates);
    let n = data.n() as f64;
    let obs = data.observations();
    let (mut lower, mut upper, mut q_bar) = (0.0, 0.0, 0.0);
    let (mut psi0_num, mut psi0_den) = (0.0, 0.0);
    for (key, members) in &cells {
        let weight = members.len() as f64 / n;
        let c = summarize(members.iter().map(|&i| &obs[i])).ok_or_else(|| Error::EmptyCell {
            name: format!("covariate cell {key:?}"),
            needed_by: "adjusted bounds".into(),
        })?;
        let (lo, hi, q, _, _) = cell_bounds(&c, &mut warnings).map_err(|e| match e {
            Error::EmptyTrimCell => Error::EmptyCell {
                name: format!("covariate cell {key:?} (Z=1,S=0)"),
                needed_by: "adjusted bounds".into(),
            },
            other => other,
        })?;
        lower += weight * lo;
        upper += weight * hi;
        q_bar += weight * q;
        psi0_num += weight * c.rho0 * c.mu01;
        psi0_den += weight * c.rho0;
    }
    let psi0 = psi0_num / psi0_den;
    Ok((lower, upper, q_bar, None, None, psi0, warnings))
}

fn finish(
    lower: f64,
    upper: f64,
    q: f64,
    t_lo: Option<f64>,
    t_hi: Option<f64>,
    psi0: f64,
    covariates: &[usize],
    warnings: Vec<Warning>,
) -> BoundsReport {
    let effect_multiplicative = if psi0.abs() < crate::functionals::DENOMINATOR_GUARD {
        None
    } else {
        Some((lower / psi0, upper / psi0))
    };
    BoundsReport {
        lower,
        upper,
        trimming_fraction: q,
        trimmed_mean_lower: t_lo,
        trimmed_mean_upper: t_hi,
        psi0_reference: psi0,
        effect_additive: (lower - psi0, upper - psi0),
        effect_multiplicative,
        ci_lower: None,
        ci_upper: None,
        adjustment_covariates: covariates.to_vec(),
        bootstrap_replicates: 0,
        failed_replicates: 0,
        warnings,
    }
}

/// Unadjusted bounds from the raw arm/cell frequencies.
pub fn bounds_unadjusted(data: &TrialData) -> Result<BoundsReport> {
    let (lower, upper, q, t_lo, t_hi, psi0, warnings) = assemble(data, &[])?;
    Ok(finish(lower, upper, q, t_lo, t_hi, psi0, &[], warnings))
}

/// Covariate-adjusted bounds: the unadjusted recipe within each cell of the
/// selected (discrete) covariates, averaged over the empirical covariate
/// distribution.
pub fn bounds_adjusted(data: &TrialData, covariates: &[usize]) -> Result<BoundsReport> {
    for &c in covariates {
        if c >= data.covariate_dim() {
            return Err(Error::Config(format!(
                "adjustment covariate index {c} out of range (dim {})",
                data.covariate_dim()
            )));
        }
    }
    let (lower, upper, q, t_lo, t_hi, psi0, warnings) = assemble(data, covariates)?;
    Ok(finish(lower, upper, q, t_lo, t_hi, psi0, covariates, warnings))
}

/// Bootstrap configuration for [`bounds_bootstrap`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSpec {
    pub replicates: usize,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub covariates: Vec<usize>,
}

fn default_alpha() -> f64 {
    0.05
}

/// Point bounds plus percentile bootstrap CIs for both endpoints.
///
/// Each replicate resamples rows with replacement using its own
/// replicate-indexed random stream, so results are identical for any worker
/// count given the same base seed. Replicates whose resample loses a required
/// cell are redrawn (fresh draws from the same stream) up to
/// [`BOOTSTRAP_RETRY_CAP`] times, then counted as failed.
pub fn bounds_bootstrap(data: &TrialData, spec: &BootstrapSpec) -> Result<BoundsReport> {
    if spec.replicates == 0 {
        return Err(Error::Config("bootstrap requires replicates >= 1".into()));
    }
    let mut report = if spec.covariates.is_empty() {
        bounds_unadjusted(data)?
    } else {
        bounds_adjusted(data, &spec.covariates)?
    };

    let n = data.n();
    let obs = data.observations();
    let names = data.covariate_names().to_vec();
    let endpoints: Vec<Option<(f64, f64)>> = (0..spec.replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(rep as u64 + 1);
            let row = Uniform::new(0, n);
            for _ in 0..=BOOTSTRAP_RETRY_CAP {
                let rows: Vec<Observation> =
                    (0..n).map(|_| obs[row.sample(&mut rng)].clone()).collect();
                let resample = match TrialData::new(rows, names.clone()) {
                    Ok(d) => d,
                    Err(_) => continue,
                };
                let result = if spec.covariates.is_empty() {
                    bounds_unadjusted(&resample)
                } else {
                    bounds_adjusted(&resample, &spec.covariates)
                };
                if let Ok(b) = result {
                    return Some((b.lower, b.upper));
                }
            }
            None
        })
        .collect();

    let failed = endpoints.iter().filter(|e| e.is_none()).count();
    let mut lowers: Vec<f64> = endpoints.iter().flatten().map(|e| e.0).collect();
    let mut uppers: Vec<f64> = endpoints.iter().flatten().map(|e| e.1).collect();
    if lowers.is_empty() {
        return Err(Error::Config(format!(
            "all {} bootstrap replicates failed",
            spec.replicates
        )));
    }
    lowers.sort_by(|a, b| a.partial_cmp(b).unwrap());
    uppers.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ci = |sorted: &[f64]| {
        (
            type1_quantile(sorted, spec.alpha / 2.0),
            type1_quantile(sorted, 1.0 - spec.alpha / 2.0),
        )
    };
    report.ci_lower = Some(ci(&lowers));
    report.ci_upper = Some(ci(&uppers));
    report.bootstrap_replicates = spec.replicates;
    report.failed_replicates = failed;
    if failed > 0 {
        report.warnings.push(Warning::new(
            codes::REPLICATE_FAILED,
            format!("{failed} bootstrap replicates failed after {BOOTSTRAP_RETRY_CAP} redraws"),
        ));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::balanced_fixture;

    #[test]
    fn zero_trimming_collapses_to_anchor() {
        // Equal infection rates across arms ⇒ q = 0 ⇒ ℓ = u = μ̄₁₁ ρ̄₁/ρ̄₀.
        let mut rows = Vec::new();
        for z in [0u8, 1] {
            for s in [0u8, 1] {
                for j in 0..20 {
                    rows.push(Observation {
                        x: vec![0.0],
                        z,
                        s,
                        y: if s == 1 { (j % 2) as f64 } else { 0.3 },
                    });
                }
            }
        }
        let data = TrialData::new(rows, vec!["x".into()]).unwrap();
        let b = bounds_unadjusted(&data).unwrap();
        assert_eq!(b.trimming_fraction, 0.0);
        assert!((b.lower - b.upper).abs() < 1e-12);
        assert!((b.lower - 0.5).abs() < 1e-12); // μ̄₁₁ = 0.5, ρ̄₁/ρ̄₀ = 1
    }

    #[test]
    fn infection_necessary_outcome_collapses_bounds() {
        let data = balanced_fixture();
        let rows: Vec<Observation> = data
            .observations()
            .iter()
            .map(|o| Observation {
                y: if o.s == 1 { o.y } else { 0.0 },
                ..o.clone()
            })
            .collect();
        let data = TrialData::new(rows, vec!["x".into()]).unwrap();
        let b = bounds_unadjusted(&data).unwrap();
        // Trimmed means are all 0, so both bounds sit at μ̄₁₁ ρ̄₁/ρ̄₀.
        assert!((b.lower - b.upper).abs() < 1e-12);
        assert!(b.trimmed_mean_lower == Some(0.0) && b.trimmed_mean_upper == Some(0.0));
    }

    #[test]
    fn tie_aware_trimmed_means_on_binary_outcomes() {
        let data = balanced_fixture();
        let b = bounds_unadjusted(&data).unwrap();
        // Arm rates: ρ̄₁ = 14/32, ρ̄₀ = 22/32 ⇒ q = (22−14)/ (32−14) = 8/18.
        let q = (22.0 / 32.0 - 14.0 / 32.0) / (1.0 - 14.0 / 32.0);
        assert!((b.trimming_fraction - q).abs() < 1e-12);
        // n₁₀ = 18, n* = ⌈q·18⌉ = 8; the cell has 11 ones (10·0.5 + 8·0.75),
        // so the 8 smallest are 7 zeros and a one, and the 8 largest all ones.
        assert_eq!(b.trimmed_mean_lower, Some(1.0 / 8.0));
        assert_eq!(b.trimmed_mean_upper, Some(1.0));
        assert!(b.lower <= b.upper);
        let (lo_add, hi_add) = b.effect_additive;
        assert!((hi_add - lo_add - (b.upper - b.lower)).abs() < 1e-12);
    }

    #[test]
    fn continuous_outcomes_use_strict_trimming() {
        // Distinct outcome values in the (1,0) cell trigger the
        // strict-inequality recipe.
        let mut rows = Vec::new();
        for j in 0..10 {
            rows.push(Observation {
                x: vec![0.0],
                z: 1,
                s: 0,
                y: j as f64 / 10.0 + 0.005,
            });
        }
        for (z, s, count, y) in [(1u8, 1u8, 10, 0.5), (0, 1, 15, 0.4), (0, 0, 5, 0.2)] {
            for _ in 0..count {
                rows.push(Observation {
                    x: vec![0.0],
                    z,
                    s,
                    y,
                });
            }
        }
        let data = TrialData::new(rows, vec!["x".into()]).unwrap();
        let b = bounds_unadjusted(&data).unwrap();
        // ρ̄₁ = 0.5, ρ̄₀ = 0.75 ⇒ q = 0.5; the q-th quantile of the 10 distinct
        // values is the 5th (0.405). Strict trimming keeps the 4 values below
        // it for the lower mean and the 5 values above it for the upper mean.
        assert!((b.trimming_fraction - 0.5).abs() < 1e-12);
        let lo = (0.005 + 0.105 + 0.205 + 0.305) / 4.0;
        let hi = (0.505 + 0.605 + 0.705 + 0.805 + 0.905) / 5.0;
        assert!((b.trimmed_mean_lower.unwrap() - lo).abs() < 1e-12);
        assert!((b.trimmed_mean_upper.unwrap() - hi).abs() < 1e-12);
    }

    #[test]
    fn single_constant_covariate_adjustment_matches_unadjusted() {
        let data = balanced_fixture();
        // Adjusting on a constant pseudo-covariate: rebuild with x ≡ 1.
        let rows: Vec<Observation> = data
            .observations()
            .iter()
            .map(|o| Observation {
                x: vec![1.0],
                ..o.clone()
            })
            .collect();
        let flat = TrialData::new(rows, vec!["c".into()]).unwrap();
        let unadj = bounds_unadjusted(&flat).unwrap();
        let adj = bounds_adjusted(&flat, &[0]).unwrap();
        assert!((unadj.lower - adj.lower).abs() < 1e-12);
        assert!((unadj.upper - adj.upper).abs() < 1e-12);
    }

    #[test]
    fn adjusted_bounds_average_cell_bounds() {
        let data = balanced_fixture();
        let adj = bounds_adjusted(&data, &[0]).unwrap();
        // Manual per-cell computation.
        let obs = data.observations();
        let mut expect = 0.0;
        for x in [0.0, 1.0] {
            let members: Vec<&Observation> = obs.iter().filter(|o| o.x[0] == x).collect();
            let weight = members.len() as f64 / data.n() as f64;
            let c = summarize(members.into_iter()).unwrap();
            let mut w = Vec::new();
            let (lo, _, _, _, _) = cell_bounds(&c, &mut w).unwrap();
            expect += weight * lo;
        }
        assert!((adj.lower - expect).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_is_seed_deterministic() {
        let data = balanced_fixture();
        let spec = BootstrapSpec {
            replicates: 25,
            seed: 42,
            alpha: 0.05,
            covariates: Vec::new(),
        };
        let a = bounds_bootstrap(&data, &spec).unwrap();
        let b = bounds_bootstrap(&data, &spec).unwrap();
        assert_eq!(a.ci_lower, b.ci_lower);
        assert_eq!(a.ci_upper, b.ci_upper);
        let (lo, hi) = a.ci_lower.unwrap();
        assert!(lo <= hi);
        assert_eq!(a.bootstrap_replicates, 25);
    }

    #[test]
    fn monotonicity_violation_clamps_q_to_zero() {
        // More infections in the vaccinated arm than control.
        let mut rows = Vec::new();
        for (z, s, count) in [(1u8, 1u8, 30), (1, 0, 10), (0, 1, 10), (0, 0, 30)] {
            for j in 0..count {
                rows.push(Observation {
                    x: vec![0.0],
                    z,
                    s,
                    y: (j % 2) as f64,
                });
            }
        }
        let data = TrialData::new(rows, vec!["x".into()]).unwrap();
        let b = bounds_unadjusted(&data).unwrap();
        assert_eq!(b.trimming_fraction, 0.0);
        assert!(b.warnings.iter().any(|w| w.code == codes::TRIM_CLAMP));
    }
}
