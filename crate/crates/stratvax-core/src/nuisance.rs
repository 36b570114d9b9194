//! Conditional nuisance models: propensity `π_z(x) = P(Z=z|X=x)`, infection
//! risk `ρ_z(x) = P(S=1|Z=z,X=x)`, and outcome regressions
//! `μ_zs(x) = E(Y|Z=z,S=s,X=x)`, plus the pooled regressions `μ_1·` (arm `Z=1`)
//! and `μ_·0` (uninfected, both arms) and the plug-in marginal scalars.
//!
//! Working models are deliberately simple and dependency-free: IRLS logistic
//! regression with step-halving, ordinary least squares, and saturated cell
//! means (the nonparametric MLE on discrete covariates). Saturated fits make
//! the one-step correction vanish exactly, which several tests rely on.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::TrialData;
use crate::report::{codes, Warning};
use crate::{Error, Result};

/// Fitted probabilities are truncated to this band before use.
pub const PREDICTION_FLOOR: f64 = 1e-6;

/// Default truncation `δ` for probabilities entering denominators.
pub const DEFAULT_DENOMINATOR_TRUNCATION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Logistic,
    Linear,
    /// One parameter per distinct covariate pattern; fits are exact cell means.
    Saturated,
}

/// Specification of a single working model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSpec {
    pub family: Family,
    /// Covariate column indices to include; `None` means all columns.
    /// An empty list requests an intercept-only model.
    #[serde(default)]
    pub covariates: Option<Vec<usize>>,
    /// Products of covariate columns added as extra regressors
    /// (pairs or triples of column indices).
    #[serde(default)]
    pub interactions: Vec<Vec<usize>>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_max_iterations() -> usize {
    100
}

fn default_tolerance() -> f64 {
    1e-8
}

impl RegressionSpec {
    pub fn logistic() -> Self {
        RegressionSpec {
            family: Family::Logistic,
            covariates: None,
            interactions: Vec::new(),
            max_iterations: default_max_iterations(),
            tolerance: default_tolerance(),
        }
    }

    pub fn saturated() -> Self {
        RegressionSpec {
            family: Family::Saturated,
            ..Self::logistic()
        }
    }

    /// Intercept-only logistic model (a deliberately misspecified working
    /// model, used by the robustness studies).
    pub fn intercept_only() -> Self {
        RegressionSpec {
            covariates: Some(Vec::new()),
            ..Self::logistic()
        }
    }

    fn resolved_columns(&self, dim: usize) -> Vec<usize> {
        match &self.covariates {
            Some(cols) => cols.clone(),
            None => (0..dim).collect(),
        }
    }
}

/// A fitted working model, evaluable at any covariate vector.
#[derive(Debug, Clone)]
pub struct FittedModel {
    family: Family,
    columns: Vec<usize>,
    interactions: Vec<Vec<usize>>,
    /// Logistic/linear: coefficients `[intercept, columns..., interactions...]`.
    coefficients: Vec<f64>,
    /// Saturated: cell-pattern → cell mean, plus a grand-mean fallback for
    /// patterns unseen during fitting.
    cells: HashMap<Vec<u64>, f64>,
    fallback: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FittedModel {
    /// Evaluates the model at `x`. Logistic and saturated predictions of
    /// probabilities are truncated to `[1e-6, 1-1e-6]`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.family {
            Family::Saturated => {
                let key: Vec<u64> = self.columns.iter().map(|&c| x[c].to_bits()).collect();
                *self.cells.get(&key).unwrap_or(&self.fallback)
            }
            Family::Logistic => expit(self.linear_predictor(x))
                .clamp(PREDICTION_FLOOR, 1.0 - PREDICTION_FLOOR),
            Family::Linear => self.linear_predictor(x),
        }
    }

    fn linear_predictor(&self, x: &[f64]) -> f64 {
        let mut eta = self.coefficients[0];
        for (k, &c) in self.columns.iter().enumerate() {
            eta += self.coefficients[1 + k] * x[c];
        }
        let base = 1 + self.columns.len();
        for (k, term) in self.interactions.iter().enumerate() {
            let prod: f64 = term.iter().map(|&c| x[c]).product();
            eta += self.coefficients[base + k] * prod;
        }
        eta
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }
}

pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Builds the design row for an observation under a spec.
fn design_row(x: &[f64], columns: &[usize], interactions: &[Vec<usize>], out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    out.extend(columns.iter().map(|&c| x[c]));
    out.extend(
        interactions
            .iter()
            .map(|term| term.iter().map(|&c| x[c]).product::<f64>()),
    );
}

/// Solves the symmetric positive-definite system `A b = v` in place by
/// Cholesky decomposition, reporting the offending column on rank deficiency.
fn solve_spd(mut a: Vec<Vec<f64>>, mut v: Vec<f64>, name: &str) -> Result<Vec<f64>> {
    let p = v.len();
    for j in 0..p {
        for k in 0..j {
            let l = a[j][k];
            for i in j..p {
                a[i][j] -= l * a[i][k];
            }
        }
        let pivot = a[j][j];
        if pivot <= 1e-12 {
            return Err(Error::RankDeficient {
                name: name.to_string(),
                column: j,
            });
        }
        let root = pivot.sqrt();
        for i in j..p {
            a[i][j] /= root;
        }
    }
    // Forward then backward substitution on the lower-triangular factor.
    for i in 0..p {
        for k in 0..i {
            v[i] -= a[i][k] * v[k];
        }
        v[i] /= a[i][i];
    }
    for i in (0..p).rev() {
        for k in (i + 1)..p {
            v[i] -= a[k][i] * v[k];
        }
        v[i] /= a[i][i];
    }
    Ok(v)
}

/// Weighted least squares step: solves `(XᵀWX) b = XᵀW r`.
fn wls(rows: &[Vec<f64>], w: &[f64], r: &[f64], name: &str) -> Result<Vec<f64>> {
    let p = rows[0].len();
    let mut xtwx = vec![vec![0.0; p]; p];
    let mut xtwr = vec![0.0; p];
    for (i, row) in rows.iter().enumerate() {
        for j in 0..p {
            let wj = w[i] * row[j];
            xtwr[j] += wj * r[i];
            for k in 0..=j {
                xtwx[j][k] += wj * row[k];
            }
        }
    }
    for j in 0..p {
        for k in (j + 1)..p {
            xtwx[j][k] = xtwx[k][j];
        }
    }
    solve_spd(xtwx, xtwr, name)
}

fn logistic_deviance(rows: &[Vec<f64>], y: &[f64], beta: &[f64]) -> f64 {
    let mut dev = 0.0;
    for (row, &yi) in rows.iter().zip(y) {
        let eta: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
        // -2 log-likelihood contribution, stable for large |eta|.
        let log1pe = if eta > 0.0 {
            eta + (-eta).exp().ln_1p()
        } else {
            eta.exp().ln_1p()
        };
        dev += 2.0 * (log1pe - yi * eta);
    }
    dev
}

/// Fits a working model of `response` on the covariates of `data`, restricted
/// to rows where `subset` returns true.
///
/// Logistic fits use iteratively reweighted least squares with step-halving
/// whenever a full Newton step increases the deviance; convergence is declared
/// when the largest per-observation-scaled score component falls below the
/// spec tolerance. Non-convergence downgrades to the best iterate with the
/// `converged` flag cleared (a warning, not an error).
pub fn fit_model(
    data: &TrialData,
    response: impl Fn(usize) -> f64,
    subset: impl Fn(usize) -> bool,
    spec: &RegressionSpec,
    name: &str,
) -> Result<FittedModel> {
    let idx: Vec<usize> = (0..data.n()).filter(|&i| subset(i)).collect();
    if idx.is_empty() {
        return Err(Error::EmptySubset { name: name.into() });
    }
    let columns = spec.resolved_columns(data.covariate_dim());
    let y: Vec<f64> = idx.iter().map(|&i| response(i)).collect();

    if spec.family == Family::Saturated {
        let obs = data.observations();
        let mut sums: HashMap<Vec<u64>, (f64, usize)> = HashMap::new();
        for (&i, &yi) in idx.iter().zip(&y) {
            let key: Vec<u64> = columns.iter().map(|&c| obs[i].x[c].to_bits()).collect();
            let e = sums.entry(key).or_insert((0.0, 0));
            e.0 += yi;
            e.1 += 1;
        }
        if sums.len() > 4096 {
            return Err(Error::Config(format!(
                "saturated fit of {name}: {} distinct covariate cells (covariates must be discrete)",
                sums.len()
            )));
        }
        let fallback = y.iter().sum::<f64>() / y.len() as f64;
        let cells = sums
            .into_iter()
            .map(|(k, (s, c))| (k, s / c as f64))
            .collect();
        return Ok(FittedModel {
            family: Family::Saturated,
            columns,
            interactions: Vec::new(),
            coefficients: Vec::new(),
            cells,
            fallback,
            converged: true,
            iterations: 0,
        });
    }

    let obs = data.observations();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(idx.len());
    let mut row = Vec::new();
    for &i in &idx {
        design_row(&obs[i].x, &columns, &spec.interactions, &mut row);
        rows.push(row.clone());
    }
    let p = rows[0].len();
    let m = rows.len() as f64;

    if spec.family == Family::Linear {
        let w = vec![1.0; rows.len()];
        let beta = wls(&rows, &w, &y, name)?;
        return Ok(FittedModel {
            family: Family::Linear,
            columns,
            interactions: spec.interactions.clone(),
            coefficients: beta,
            cells: HashMap::new(),
            fallback: 0.0,
            converged: true,
            iterations: 1,
        });
    }

    // IRLS for the logistic family.
    let mut beta = vec![0.0; p];
    let mut deviance = logistic_deviance(&rows, &y, &beta);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=spec.max_iterations {
        iterations = iter;
        let mu: Vec<f64> = rows
            .iter()
            .map(|r| expit(r.iter().zip(&beta).map(|(a, b)| a * b).sum()))
            .collect();
        // Score scaled by the subset size, so the tolerance is sample-size free.
        let mut score = vec![0.0; p];
        for (r, (&yi, &mi)) in rows.iter().zip(y.iter().zip(&mu)) {
            for j in 0..p {
                score[j] += r[j] * (yi - mi) / m;
            }
        }
        if score.iter().all(|s| s.abs() <= spec.tolerance) {
            converged = true;
            break;
        }
        let w: Vec<f64> = mu.iter().map(|&mi| (mi * (1.0 - mi)).max(1e-10)).collect();
        let r_work: Vec<f64> = rows
            .iter()
            .zip(y.iter().zip(&mu))
            .map(|(row, (&yi, &mi))| {
                let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
                eta + (yi - mi) / (mi * (1.0 - mi)).max(1e-10)
            })
            .collect();
        let proposal = wls(&rows, &w, &r_work, name)?;
        // Step-halving: accept the first step (full or halved) that does not
        // increase the deviance; bail out after 30 halvings.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate: Vec<f64> = beta
                .iter()
                .zip(&proposal)
                .map(|(b, q)| b + step * (q - b))
                .collect();
            let cand_dev = logistic_deviance(&rows, &y, &candidate);
            if cand_dev <= deviance + 1e-12 {
                beta = candidate;
                deviance = cand_dev;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // stalled: report best iterate with converged = false
        }
    }

    Ok(FittedModel {
        family: Family::Logistic,
        columns,
        interactions: spec.interactions.clone(),
        coefficients: beta,
        cells: HashMap::new(),
        fallback: 0.0,
        converged,
        iterations,
    })
}

/// Which working model to use for each nuisance function.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceConfig {
    pub pi: RegressionSpec,
    pub rho: RegressionSpec,
    pub mu: RegressionSpec,
    /// Overrides for individual nuisances, keyed by name
    /// (`pi1`, `rho0`, `rho1`, `mu00`, `mu01`, `mu10`, `mu11`, `mu1dot`, `mudot0`).
    #[serde(default)]
    pub overrides: HashMap<String, RegressionSpec>,
    /// Fit `ρ₀, ρ₁` from one joint logistic model of `S` on `(Z, X)` with the
    /// vaccine coefficient clamped at ≤ 0, guaranteeing `ρ₁(x) ≤ ρ₀(x)`
    /// everywhere. Required by the sensitivity module.
    #[serde(default)]
    pub monotone_rho: bool,
    /// Truncation bound for probabilities entering denominators.
    #[serde(default = "default_truncation")]
    pub truncation: f64,
}

fn default_truncation() -> f64 {
    DEFAULT_DENOMINATOR_TRUNCATION
}

impl NuisanceConfig {
    pub fn all(spec: RegressionSpec) -> Self {
        NuisanceConfig {
            pi: spec.clone(),
            rho: spec.clone(),
            mu: spec,
            overrides: HashMap::new(),
            monotone_rho: false,
            truncation: DEFAULT_DENOMINATOR_TRUNCATION,
        }
    }

    pub fn all_saturated() -> Self {
        Self::all(RegressionSpec::saturated())
    }

    pub fn all_logistic() -> Self {
        Self::all(RegressionSpec::logistic())
    }

    fn spec_for(&self, name: &str) -> &RegressionSpec {
        if let Some(s) = self.overrides.get(name) {
            return s;
        }
        match name {
            "pi1" => &self.pi,
            "rho0" | "rho1" => &self.rho,
            _ => &self.mu,
        }
    }
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self::all_logistic()
    }
}

/// The full set of fitted nuisances with per-observation predictions cached,
/// plus plug-in marginal scalars.
///
/// Cached prediction vectors are aligned with the row order of the fitting
/// data; every estimator in this crate consumes those vectors rather than
/// re-evaluating models.
#[derive(Debug, Clone)]
pub struct NuisanceSet {
    /// `P(Z=1|X=xᵢ)` per row.
    pub pi1: Vec<f64>,
    /// `P(S=1|Z=0,X=xᵢ)` per row.
    pub rho0: Vec<f64>,
    /// `P(S=1|Z=1,X=xᵢ)` per row.
    pub rho1: Vec<f64>,
    /// `E(Y|Z=z,S=s,X=xᵢ)` per row, indexed `[z][s]`.
    pub mu: [[Vec<f64>; 2]; 2],
    /// `E(Y|Z=1,X=xᵢ)` per row.
    pub mu1dot: Vec<f64>,
    /// `E(Y|Z=0,X=xᵢ)` per row (for marginal contrasts).
    pub mu0dot: Vec<f64>,
    /// `E(Y|S=0,X=xᵢ)` per row (pooled arms among the uninfected).
    pub mudot0: Vec<f64>,
    /// Plug-in marginals: sample averages of the fitted conditionals.
    pub rb0: f64,
    pub rb1: f64,
    pub mu00_bar: f64,
    pub mu1dot_bar: f64,
    /// Overall infected fraction `ρ̄_· = n⁻¹Σ {π₁ρ₁ + (1−π₁)ρ₀}(xᵢ)`.
    pub rb_all: f64,
    /// Truncation bound `δ` applied to probabilities entering denominators.
    pub truncation: f64,
    /// The fitted models, for prediction at new covariate points.
    pub models: HashMap<String, FittedModel>,
    pub warnings: Vec<Warning>,
}

impl NuisanceSet {
    /// Fits every nuisance on its proper subset: `μ_zs` on `{Z=z, S=s}`,
    /// `ρ_z` on `{Z=z}`, `μ_z·` on `{Z=z}`, `μ_·0` on `{S=0}`, and the
    /// propensity on the full sample unless `known_propensity` fixes it.
    pub fn fit(
        data: &TrialData,
        config: &NuisanceConfig,
        known_propensity: Option<f64>,
    ) -> Result<Self> {
        let obs = data.observations();
        let n = data.n();
        let mut models = HashMap::new();
        let mut warnings = Vec::new();

        let fit_cached = |name: &str,
                              response: &dyn Fn(usize) -> f64,
                              subset: &dyn Fn(usize) -> bool,
                              models: &mut HashMap<String, FittedModel>,
                              warnings: &mut Vec<Warning>|
         -> Result<Vec<f64>> {
            let model = fit_model(data, response, subset, config.spec_for(name), name)?;
            if !model.converged {
                warnings.push(Warning::new(
                    codes::NON_CONVERGENCE,
                    format!("{name}: IRLS stopped after {} iterations", model.iterations),
                ));
            }
            let preds: Vec<f64> = obs.iter().map(|o| model.predict(&o.x)).collect();
            models.insert(name.to_string(), model);
            Ok(preds)
        };

        let pi1 = match known_propensity {
            Some(p) => {
                if !(0.0 < p && p < 1.0) {
                    return Err(Error::Config(format!(
                        "known propensity must lie in (0,1), got {p}"
                    )));
                }
                vec![p; n]
            }
            None => fit_cached(
                "pi1",
                &|i| obs[i].z as f64,
                &|_| true,
                &mut models,
                &mut warnings,
            )?,
        };

        let (rho0, rho1) = if config.monotone_rho {
            Self::fit_monotone_rho(data, config, &mut models, &mut warnings)?
        } else {
            let rho0 = fit_cached(
                "rho0",
                &|i| obs[i].s as f64,
                &|i| obs[i].z == 0,
                &mut models,
                &mut warnings,
            )?;
            let rho1 = fit_cached(
                "rho1",
                &|i| obs[i].s as f64,
                &|i| obs[i].z == 1,
                &mut models,
                &mut warnings,
            )?;
            (rho0, rho1)
        };

        let mut mu: [[Vec<f64>; 2]; 2] = Default::default();
        for z in 0..2u8 {
            for s in 0..2u8 {
                let name = format!("mu{z}{s}");
                if !obs.iter().any(|o| o.z == z && o.s == s) {
                    return Err(Error::EmptyCell {
                        name,
                        needed_by: "nuisance set".into(),
                    });
                }
                mu[z as usize][s as usize] = fit_cached(
                    &name,
                    &|i| obs[i].y,
                    &|i| obs[i].z == z && obs[i].s == s,
                    &mut models,
                    &mut warnings,
                )?;
            }
        }
        let mu1dot = fit_cached(
            "mu1dot",
            &|i| obs[i].y,
            &|i| obs[i].z == 1,
            &mut models,
            &mut warnings,
        )?;
        let mu0dot = fit_cached(
            "mu0dot",
            &|i| obs[i].y,
            &|i| obs[i].z == 0,
            &mut models,
            &mut warnings,
        )?;
        let mudot0 = fit_cached(
            "mudot0",
            &|i| obs[i].y,
            &|i| obs[i].s == 0,
            &mut models,
            &mut warnings,
        )?;

        let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
        let rb0 = mean(&rho0);
        let rb1 = mean(&rho1);
        let mu00_bar = mean(&mu[0][0]);
        let mu1dot_bar = mean(&mu1dot);
        let rb_all = (0..n)
            .map(|i| pi1[i] * rho1[i] + (1.0 - pi1[i]) * rho0[i])
            .sum::<f64>()
            / n as f64;

        Ok(NuisanceSet {
            pi1,
            rho0,
            rho1,
            mu,
            mu1dot,
            mu0dot,
            mudot0,
            rb0,
            rb1,
            mu00_bar,
            mu1dot_bar,
            rb_all,
            truncation: config.truncation,
            models,
            warnings,
        })
    }

    /// Joint monotone fit: one logistic model of `S` on `(Z, X)`. The design
    /// places `Z` first, so a fitted positive vaccine coefficient (which would
    /// let `ρ₁ > ρ₀`) is clamped to zero with a warning.
    fn fit_monotone_rho(
        data: &TrialData,
        config: &NuisanceConfig,
        models: &mut HashMap<String, FittedModel>,
        warnings: &mut Vec<Warning>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let obs = data.observations();
        // Augment each row's covariates with z in front, reusing the plain
        // logistic machinery on a temporary dataset.
        let augmented: Vec<crate::dataset::Observation> = obs
            .iter()
            .map(|o| {
                let mut x = Vec::with_capacity(o.x.len() + 1);
                x.push(o.z as f64);
                x.extend_from_slice(&o.x);
                crate::dataset::Observation {
                    x,
                    z: o.z,
                    s: o.s,
                    y: o.y,
                }
            })
            .collect();
        let mut names = vec!["__z__".to_string()];
        names.extend_from_slice(data.covariate_names());
        let aug = TrialData::new(augmented, names)?;

        let base = config.spec_for("rho0");
        let mut spec = base.clone();
        spec.family = Family::Logistic; // saturated cannot encode the constraint
        let cols = {
            let mut cols = vec![0usize];
            cols.extend(
                base.resolved_columns(data.covariate_dim())
                    .iter()
                    .map(|c| c + 1),
            );
            cols
        };
        spec.covariates = Some(cols);
        spec.interactions = base
            .interactions
            .iter()
            .map(|t| t.iter().map(|c| c + 1).collect())
            .collect();

        let mut model = fit_model(&aug, |i| obs[i].s as f64, |_| true, &spec, "rho_joint")?;
        if !model.converged {
            warnings.push(Warning::new(
                codes::NON_CONVERGENCE,
                format!(
                    "rho_joint: IRLS stopped after {} iterations",
                    model.iterations
                ),
            ));
        }
        if model.coefficients[1] > 0.0 {
            warnings.push(Warning::new(
                codes::MONOTONE_COEF_CLAMP,
                format!(
                    "joint infection model: vaccine coefficient {:.4} clamped to 0",
                    model.coefficients[1]
                ),
            ));
            model.coefficients[1] = 0.0;
        }
        let mut rho0 = Vec::with_capacity(obs.len());
        let mut rho1 = Vec::with_capacity(obs.len());
        let mut xa = Vec::new();
        for o in obs {
            xa.clear();
            xa.push(0.0);
            xa.extend_from_slice(&o.x);
            rho0.push(model.predict(&xa));
            xa[0] = 1.0;
            rho1.push(model.predict(&xa));
        }
        models.insert("rho_joint".to_string(), model);
        Ok((rho0, rho1))
    }

    /// Clamps a probability entering a denominator to `[δ, 1-δ]`.
    pub fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.truncation, 1.0 - self.truncation)
    }

    pub fn n(&self) -> usize {
        self.pi1.len()
    }
}
