//! Synthetic trial generators, ground-truth oracles, replication studies, and
//! power surfaces.
//!
//! Two designs are provided:
//!
//! * [`StudyDesign::Asymptotics`] — three independent Bernoulli(0.5)
//!   covariates, stratum membership from covariate-dependent logits, a
//!   confounded treatment assignment, and scalar knobs `eps_i` / `eps_p` that
//!   break the exclusion restriction (Immune treated outcome scaled away from
//!   the untreated one) and partial ignorability (Protected treated outcome
//!   scaled away from the Immune one). Its discrete covariate support admits
//!   an exact enumeration oracle.
//! * [`StudyDesign::ProvideCalibrated`] — a randomized `n = 700`-scale design
//!   with mixed covariates (binary, Gaussian, truncated negative binomial),
//!   softmax stratum membership shifted by `delta_i` / `delta_p`, and
//!   log-odds outcome shifts `eta_d` / `eta_p` within the Doomed and Protected
//!   strata. Truth requires Monte Carlo integration.
//!
//! Every generated row carries its full potential-outcome ledger, so the
//! Monte-Carlo truth oracle is a plain average of potentials. Random streams
//! are counter-based and replicate-indexed: results are identical for any
//! worker count given the same base seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::bounds_unadjusted;
use crate::dataset::{Observation, TrialData};
use crate::functionals::EstimandId;
use crate::nuisance::{expit, logit, NuisanceConfig, NuisanceSet};
use crate::onestep::{contrast, kahan_mean, one_step, ContrastScale, EstimateReport};
use crate::report::Warning;
use crate::{Error, Result};

/// Which synthetic trial to generate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "study", rename_all = "snake_case")]
pub enum StudyDesign {
    /// Discrete-covariate design with confounded assignment. `eps_i` scales
    /// the Immune treated outcome (1 = exclusion restriction holds); `eps_p`
    /// scales the Protected treated outcome (1 = partial ignorability holds).
    Asymptotics { eps_i: f64, eps_p: f64 },
    /// Randomized design calibrated to an infant rotavirus-vaccine trial.
    /// `delta_i`/`delta_p` shift stratum composition; `eta_d`/`eta_p` are
    /// log-odds treatment effects in the Doomed and Protected strata.
    ProvideCalibrated {
        delta_i: f64,
        delta_p: f64,
        eta_d: f64,
        eta_p: f64,
        /// Variance-to-mean ratio of the count covariate (must exceed 1).
        #[serde(default = "default_nb_ratio")]
        nb_variance_ratio: f64,
    },
}

fn default_nb_ratio() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DgpSpec {
    #[serde(flatten)]
    pub design: StudyDesign,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Doomed,
    Immune,
    Protected,
}

/// One generated participant with the full potential-outcome ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialRow {
    pub x: Vec<f64>,
    pub stratum: Stratum,
    pub s0: u8,
    pub s1: u8,
    pub y0: f64,
    pub y1: f64,
    pub z: u8,
    pub s: u8,
    pub y: f64,
}

/// Per-covariate-point stratum probabilities and stratum/arm outcome means.
#[derive(Debug, Clone, Copy)]
struct LocalLaw {
    p_doomed: f64,
    p_immune: f64,
    p_protected: f64,
    y0: [f64; 3], // indexed by Stratum as Doomed, Immune, Protected
    y1: [f64; 3],
    pi1: f64,
}

fn local_law(design: &StudyDesign, x: &[f64]) -> LocalLaw {
    match *design {
        StudyDesign::Asymptotics { eps_i, eps_p } => {
            let (x1, x2, x3) = (x[0], x[1], x[2]);
            let p_doomed = expit(-1.0 + 0.5 * x1 - x1 * x2 - 0.5 * x3);
            let p_immune = expit(-1.0 + 0.5 * x1 - x1 * x3 - 0.5 * x3);
            let p_protected = 1.0 - p_doomed - p_immune;
            let y0_d = expit(-1.0 + 0.5 * x1 - x1 * x2 + 0.5 * x3);
            let y1_d = expit(logit(y0_d) + 0.1);
            let y0_i = expit(-0.5 + 0.5 * x1 - x1 * x3 + 0.5 * x2);
            // Probability-scale scalings; the knobs never exceed 1 here, so
            // the products stay valid probabilities.
            let y1_i = eps_i * y0_i;
            let y0_p = y0_d;
            let y1_p = eps_p * y1_i;
            let pi1 = expit(-0.14 - 0.5 * x1 + x1 * x2 - 1.2 * x3);
            LocalLaw {
                p_doomed,
                p_immune,
                p_protected,
                y0: [y0_d, y0_i, y0_p],
                y1: [y1_d, y1_i, y1_p],
                pi1,
            }
        }
        StudyDesign::ProvideCalibrated {
            delta_i,
            delta_p,
            eta_d,
            eta_p,
            ..
        } => {
            let (x1, x2, x3) = (x[0], x[1], x[2]);
            let g_d = -1.2 + 0.81 * x1 + 0.18 * x2 + 0.06 * x3 + delta_p;
            let g_i = 1.5 - 0.30 * x1 + 0.10 * x2 - 0.08 * x3 + delta_i + delta_p;
            let denom = 1.0 + g_d.exp() + g_i.exp();
            let p_doomed = g_d.exp() / denom;
            let p_immune = g_i.exp() / denom;
            let p_protected = 1.0 / denom;
            let y1_d = expit(-0.70 + 0.78 * x1 + 1.44 * x2 + 0.49 * x3);
            let y0_d = expit(logit(y1_d) - eta_d);
            let y0_p = y0_d;
            let y1_p = expit(logit(y0_p) + eta_p);
            let y1_i = y1_p;
            let y0_i = y1_i;
            LocalLaw {
                p_doomed,
                p_immune,
                p_protected,
                y0: [y0_d, y0_i, y0_p],
                y1: [y1_d, y1_i, y1_p],
                pi1: 0.5,
            }
        }
    }
}

fn draw_covariates(design: &StudyDesign, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match *design {
        StudyDesign::Asymptotics { .. } => {
            vec![
                rng.gen_bool(0.5) as u8 as f64,
                rng.gen_bool(0.5) as u8 as f64,
                rng.gen_bool(0.5) as u8 as f64,
            ]
        }
        StudyDesign::ProvideCalibrated {
            nb_variance_ratio, ..
        } => {
            let x1 = rng.gen_bool(0.5) as u8 as f64;
            let x2 = Normal::new(-0.97, 0.90).unwrap().sample(rng);
            // Gamma-Poisson mixture: mean m, variance ratio·m, truncated ≥ 1.
            let m = 5.26;
            let theta = nb_variance_ratio - 1.0;
            let shape = m / theta;
            let lambda = Gamma::new(shape, theta).unwrap().sample(rng);
            let x3 = (Poisson::new(lambda.max(1e-12)).unwrap().sample(rng) as f64).max(1.0);
            vec![x1, x2, x3]
        }
    }
}

fn draw_row(design: &StudyDesign, rng: &mut ChaCha8Rng) -> PotentialRow {
    let x = draw_covariates(design, rng);
    let law = local_law(design, &x);
    let u: f64 = rng.gen();
    let (stratum, idx) = if u < law.p_doomed {
        (Stratum::Doomed, 0)
    } else if u < law.p_doomed + law.p_immune {
        (Stratum::Immune, 1)
    } else {
        (Stratum::Protected, 2)
    };
    let (s0, s1) = match stratum {
        Stratum::Doomed => (1, 1),
        Stratum::Immune => (0, 0),
        Stratum::Protected => (1, 0),
    };
    let y0 = rng.gen_bool(law.y0[idx]) as u8 as f64;
    let y1 = rng.gen_bool(law.y1[idx]) as u8 as f64;
    let z = rng.gen_bool(law.pi1) as u8;
    let (s, y) = if z == 1 { (s1, y1) } else { (s0, y0) };
    PotentialRow {
        x,
        stratum,
        s0,
        s1,
        y0,
        y1,
        z,
        s,
        y,
    }
}

fn covariate_names() -> Vec<String> {
    vec!["x1".into(), "x2".into(), "x3".into()]
}

/// Generates one trial on the stream `stream` derived from the base seed.
/// Stream 0 is the canonical dataset; replication studies use streams
/// `1..=replicates`.
pub fn generate_stream(spec: &DgpSpec, stream: u64) -> Result<(TrialData, Vec<PotentialRow>)> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let ledger: Vec<PotentialRow> = (0..spec.n).map(|_| draw_row(&spec.design, &mut rng)).collect();
    let rows: Vec<Observation> = ledger
        .iter()
        .map(|r| Observation {
            x: r.x.clone(),
            z: r.z,
            s: r.s,
            y: r.y,
        })
        .collect();
    let data = TrialData::new(rows, covariate_names())?;
    Ok((data, ledger))
}

/// Generates the canonical trial for a spec (stream 0).
pub fn generate(spec: &DgpSpec) -> Result<(TrialData, Vec<PotentialRow>)> {
    generate_stream(spec, 0)
}

fn validate(spec: &DgpSpec) -> Result<()> {
    if spec.n == 0 {
        return Err(Error::Config("dgp requires n >= 1".into()));
    }
    match spec.design {
        StudyDesign::Asymptotics { eps_i, eps_p } => {
            if !(0.0..=1.0).contains(&eps_i) || !(0.0..=1.0).contains(&eps_p) {
                return Err(Error::Config(format!(
                    "outcome scaling knobs must lie in [0,1], got eps_i={eps_i}, eps_p={eps_p}"
                )));
            }
        }
        StudyDesign::ProvideCalibrated {
            nb_variance_ratio, ..
        } => {
            if nb_variance_ratio <= 1.0 {
                return Err(Error::Config(format!(
                    "nb_variance_ratio must exceed 1, got {nb_variance_ratio}"
                )));
            }
        }
    }
    Ok(())
}

/// How a truth record was computed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Provenance {
    ExactEnumeration,
    /// `se` is the largest Monte-Carlo standard error across the record's
    /// mean-valued fields.
    MonteCarlo { draws: usize, se: f64 },
}

/// Ground-truth values of every estimand and effect for a design.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    /// `E{Y(1)|S(0)=1}` and `E{Y(0)|S(0)=1}`.
    pub psi1: f64,
    pub psi0: f64,
    pub additive: f64,
    pub multiplicative: f64,
    /// Doomed-stratum analogues.
    pub eta1: f64,
    pub eta0: f64,
    pub doomed_additive: f64,
    /// Marginal (whole-population) arm means and effect.
    pub marginal_mu1: f64,
    pub marginal_mu0: f64,
    pub marginal_additive: f64,
    pub p_doomed: f64,
    pub p_immune: f64,
    pub p_protected: f64,
    /// Vaccine efficacy `1 − ρ̄₁/ρ̄₀` on potential infections.
    pub ve: f64,
    /// Population limits of the unadjusted bound estimators (exact mode only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound_lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound_upper: Option<f64>,
    pub provenance: Provenance,
}

/// Exact truth by enumerating the discrete covariate support (the
/// discrete-covariate design only; the calibrated design has continuous
/// covariates and needs Monte Carlo).
pub fn truth_exact(design: &StudyDesign) -> Result<TruthRecord> {
    if !matches!(design, StudyDesign::Asymptotics { .. }) {
        return Err(Error::ExactTruthUnsupported);
    }
    let mut support = Vec::new();
    for x1 in [0.0, 1.0] {
        for x2 in [0.0, 1.0] {
            for x3 in [0.0, 1.0] {
                support.push(vec![x1, x2, x3]);
            }
        }
    }
    let w = 1.0 / support.len() as f64;
    let mut acc = TruthAccumulator::default();
    for x in &support {
        let law = local_law(design, x);
        acc.add(&law, w);
    }
    Ok(acc.finish(Provenance::ExactEnumeration, true))
}

/// Accumulates weighted moments of a local law into truth fields.
#[derive(Default)]
struct TruthAccumulator {
    // Naturally Infected numerators and mass.
    ni_y1: f64,
    ni_y0: f64,
    ni_mass: f64,
    doomed_y1: f64,
    doomed_y0: f64,
    doomed_mass: f64,
    immune_mass: f64,
    protected_mass: f64,
    mu1: f64,
    mu0: f64,
    // Observed-arm marginals for the bound limits (assignment-weighted).
    z1_mass: f64,
    z0_mass: f64,
    z1_infected: f64,
    z0_infected: f64,
    z1_mu11: f64,
    z1_uninfected: f64,
    z1_y10: f64,
}

impl TruthAccumulator {
    fn add(&mut self, law: &LocalLaw, w: f64) {
        let (pd, pi, pp) = (law.p_doomed, law.p_immune, law.p_protected);
        self.ni_y1 += w * (pd * law.y1[0] + pp * law.y1[2]);
        self.ni_y0 += w * (pd * law.y0[0] + pp * law.y0[2]);
        self.ni_mass += w * (pd + pp);
        self.doomed_y1 += w * pd * law.y1[0];
        self.doomed_y0 += w * pd * law.y0[0];
        self.doomed_mass += w * pd;
        self.immune_mass += w * pi;
        self.protected_mass += w * pp;
        self.mu1 += w * (pd * law.y1[0] + pi * law.y1[1] + pp * law.y1[2]);
        self.mu0 += w * (pd * law.y0[0] + pi * law.y0[1] + pp * law.y0[2]);
        let pi1 = law.pi1;
        self.z1_mass += w * pi1;
        self.z0_mass += w * (1.0 - pi1);
        self.z1_infected += w * pi1 * pd;
        self.z0_infected += w * (1.0 - pi1) * (pd + pp);
        self.z1_mu11 += w * pi1 * pd * law.y1[0];
        self.z1_uninfected += w * pi1 * (pi + pp);
        self.z1_y10 += w * pi1 * (pi * law.y1[1] + pp * law.y1[2]);
    }

    fn finish(self, provenance: Provenance, with_bounds: bool) -> TruthRecord {
        let psi1 = self.ni_y1 / self.ni_mass;
        let psi0 = self.ni_y0 / self.ni_mass;
        let eta1 = self.doomed_y1 / self.doomed_mass;
        let eta0 = self.doomed_y0 / self.doomed_mass;
        // Potential-infection vaccine efficacy.
        let ve = 1.0 - self.doomed_mass / self.ni_mass;
        let (bound_lower, bound_upper) = if with_bounds {
            // Population limits of the unadjusted recipe: arm-conditional
            // (assignment-weighted) infection rates and cell means.
            let rho1 = self.z1_infected / self.z1_mass;
            let rho0 = self.z0_infected / self.z0_mass;
            let mu11 = self.z1_mu11 / self.z1_infected;
            let p10 = self.z1_y10 / self.z1_uninfected; // P(Y=1 | Z=1, S=0)
            let q = ((rho0 - rho1) / (1.0 - rho1)).clamp(0.0, 1.0);
            let anchor = mu11 * rho1 / rho0;
            if q == 0.0 {
                (Some(anchor), Some(anchor))
            } else {
                // Binary outcome: the lowest q-fraction of the (1,0) cell is
                // all zeros until the zero mass (1−p10) is exhausted.
                let t_lo = ((q - (1.0 - p10)).max(0.0)) / q;
                let t_hi = p10.min(q) / q;
                let weight = 1.0 - rho1 / rho0;
                (Some(anchor + t_lo * weight), Some(anchor + t_hi * weight))
            }
        } else {
            (None, None)
        };
        TruthRecord {
            psi1,
            psi0,
            additive: psi1 - psi0,
            multiplicative: psi1 / psi0,
            eta1,
            eta0,
            doomed_additive: eta1 - eta0,
            marginal_mu1: self.mu1,
            marginal_mu0: self.mu0,
            marginal_additive: self.mu1 - self.mu0,
            p_doomed: self.doomed_mass,
            p_immune: self.immune_mass,
            p_protected: self.protected_mass,
            ve,
            bound_lower,
            bound_upper,
            provenance,
        }
    }
}

/// Builds a [`NuisanceSet`] holding the *true* conditional functions of a
/// design, evaluated at each row of `data` (no fitting). Marginal scalars are
/// sample averages of the true conditionals, matching the plug-in convention.
/// Used to validate gradients at the truth.
pub fn true_nuisance_set(design: &StudyDesign, data: &TrialData) -> NuisanceSet {
    let obs = data.observations();
    let n = obs.len() as f64;
    let mut set = NuisanceSet {
        pi1: Vec::new(),
        rho0: Vec::new(),
        rho1: Vec::new(),
        mu: Default::default(),
        mu1dot: Vec::new(),
        mu0dot: Vec::new(),
        mudot0: Vec::new(),
        rb0: 0.0,
        rb1: 0.0,
        mu00_bar: 0.0,
        mu1dot_bar: 0.0,
        rb_all: 0.0,
        truncation: crate::nuisance::DEFAULT_DENOMINATOR_TRUNCATION,
        models: Default::default(),
        warnings: Vec::new(),
    };
    for o in obs {
        let law = local_law(design, &o.x);
        let (pd, pi, pp) = (law.p_doomed, law.p_immune, law.p_protected);
        let rho0 = pd + pp;
        let rho1 = pd;
        let mu11 = law.y1[0];
        let mu01 = (pd * law.y0[0] + pp * law.y0[2]) / rho0;
        let mu10 = (pi * law.y1[1] + pp * law.y1[2]) / (pi + pp);
        let mu00 = law.y0[1];
        let mu1dot = rho1 * mu11 + (1.0 - rho1) * mu10;
        let mu0dot = rho0 * mu01 + (1.0 - rho0) * mu00;
        let s0_mass = law.pi1 * (pi + pp) + (1.0 - law.pi1) * pi;
        let mudot0 =
            (law.pi1 * (pi + pp) * mu10 + (1.0 - law.pi1) * pi * mu00) / s0_mass;
        set.pi1.push(law.pi1);
        set.rho0.push(rho0);
        set.rho1.push(rho1);
        set.mu[0][0].push(mu00);
        set.mu[0][1].push(mu01);
        set.mu[1][0].push(mu10);
        set.mu[1][1].push(mu11);
        set.mu1dot.push(mu1dot);
        set.mu0dot.push(mu0dot);
        set.mudot0.push(mudot0);
        set.rb0 += rho0 / n;
        set.rb1 += rho1 / n;
        set.mu00_bar += mu00 / n;
        set.mu1dot_bar += mu1dot / n;
        set.rb_all += (law.pi1 * rho1 + (1.0 - law.pi1) * rho0) / n;
    }
    set
}

/// Monte-Carlo truth: averages local laws over `draws` covariate draws
/// (integrating the stratum and outcome indicators analytically, which removes
/// all randomness except the covariate sampling).
pub fn truth_monte_carlo(design: &StudyDesign, draws: usize, seed: u64) -> Result<TruthRecord> {
    if draws == 0 {
        return Err(Error::Config("monte carlo truth requires draws >= 1".into()));
    }
    const CHUNK: usize = 1 << 16;
    let chunks: Vec<(usize, usize)> = (0..draws)
        .step_by(CHUNK)
        .map(|start| (start / CHUNK, CHUNK.min(draws - start)))
        .collect();
    let partials: Vec<(TruthAccumulator, f64, f64)> = chunks
        .par_iter()
        .map(|&(chunk_idx, count)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk_idx as u64 + 1);
            let mut acc = TruthAccumulator::default();
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..count {
                let x = draw_covariates(design, &mut rng);
                let law = local_law(design, &x);
                acc.add(&law, 1.0);
                let v = law.p_doomed * law.y1[0] + law.p_protected * law.y1[2];
                sum += v;
                sumsq += v * v;
            }
            (acc, sum, sumsq)
        })
        .collect();
    let mut acc = TruthAccumulator::default();
    let (mut sum, mut sumsq) = (0.0, 0.0);
    for (p, s, s2) in partials {
        acc.merge(&p);
        sum += s;
        sumsq += s2;
    }
    acc.scale(1.0 / draws as f64);
    let m = sum / draws as f64;
    let se = ((sumsq / draws as f64 - m * m).max(0.0) / draws as f64).sqrt();
    let with_bounds = matches!(design, StudyDesign::Asymptotics { .. });
    Ok(acc.finish(
        Provenance::MonteCarlo { draws, se },
        with_bounds,
    ))
}

impl TruthAccumulator {
    fn merge(&mut self, other: &TruthAccumulator) {
        self.ni_y1 += other.ni_y1;
        self.ni_y0 += other.ni_y0;
        self.ni_mass += other.ni_mass;
        self.doomed_y1 += other.doomed_y1;
        self.doomed_y0 += other.doomed_y0;
        self.doomed_mass += other.doomed_mass;
        self.immune_mass += other.immune_mass;
        self.protected_mass += other.protected_mass;
        self.mu1 += other.mu1;
        self.mu0 += other.mu0;
        self.z1_mass += other.z1_mass;
        self.z0_mass += other.z0_mass;
        self.z1_infected += other.z1_infected;
        self.z0_infected += other.z0_infected;
        self.z1_mu11 += other.z1_mu11;
        self.z1_uninfected += other.z1_uninfected;
        self.z1_y10 += other.z1_y10;
    }

    fn scale(&mut self, by: f64) {
        self.ni_y1 *= by;
        self.ni_y0 *= by;
        self.ni_mass *= by;
        self.doomed_y1 *= by;
        self.doomed_y0 *= by;
        self.doomed_mass *= by;
        self.immune_mass *= by;
        self.protected_mass *= by;
        self.mu1 *= by;
        self.mu0 *= by;
        self.z1_mass *= by;
        self.z0_mass *= by;
        self.z1_infected *= by;
        self.z0_infected *= by;
        self.z1_mu11 *= by;
        self.z1_uninfected *= by;
        self.z1_y10 *= by;
    }
}

/// Mapping from the calibrated design's log-odds effect knobs to the
/// covariate-averaged stratum risk differences used as power-surface axes:
/// `rd_d = E_X{y₁,D(X) − y₀,D(X)}` and `rd_p = E_X{y₁,P(X) − y₀,P(X)}`.
pub fn stratum_rd_mapping(design: &StudyDesign, draws: usize, seed: u64) -> Result<(f64, f64)> {
    if !matches!(design, StudyDesign::ProvideCalibrated { .. }) {
        return Err(Error::Config(
            "stratum RD mapping applies to the calibrated design".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (mut rd_d, mut rd_p) = (0.0, 0.0);
    for _ in 0..draws {
        let x = draw_covariates(design, &mut rng);
        let law = local_law(design, &x);
        rd_d += law.y1[0] - law.y0[0];
        rd_p += law.y1[2] - law.y0[2];
    }
    Ok((rd_d / draws as f64, rd_p / draws as f64))
}

/// One estimator tracked by a replication study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "estimand", rename_all = "snake_case")]
pub enum StudyEstimator {
    /// One-step point estimate of a single estimand.
    Point(EstimandId),
    /// One-step difference against the estimand's natural reference
    /// (`ψ₁,◦ − ψ₀`, `η₁ − η₀`, or the marginal arm difference).
    AdditiveEffect(EstimandId),
    /// Ratio against the same reference, log-scale delta-method inference.
    MultiplicativeEffect(EstimandId),
}

impl StudyEstimator {
    /// The untreated reference each treated-arm estimand is contrasted with.
    pub fn reference(estimand: EstimandId) -> EstimandId {
        match estimand {
            EstimandId::Eta1 => EstimandId::Eta0,
            EstimandId::MarginalMu1 => EstimandId::MarginalMu0,
            _ => EstimandId::Psi0,
        }
    }

    pub fn label(&self) -> String {
        match self {
            StudyEstimator::Point(e) => e.name().to_string(),
            StudyEstimator::AdditiveEffect(e) => {
                format!("{} - {}", e.name(), Self::reference(*e).name())
            }
            StudyEstimator::MultiplicativeEffect(e) => {
                format!("{} / {}", e.name(), Self::reference(*e).name())
            }
        }
    }

    /// The target value under a truth record.
    pub fn truth(&self, t: &TruthRecord) -> f64 {
        let point = |e: EstimandId| match e {
            EstimandId::Psi0 => t.psi0,
            EstimandId::Psi1Er | EstimandId::Psi1Pi | EstimandId::Psi1Both => t.psi1,
            EstimandId::Eta0 => t.eta0,
            EstimandId::Eta1 => t.eta1,
            EstimandId::MarginalMu1 => t.marginal_mu1,
            EstimandId::MarginalMu0 => t.marginal_mu0,
        };
        match self {
            StudyEstimator::Point(e) => point(*e),
            StudyEstimator::AdditiveEffect(e) => point(*e) - point(Self::reference(*e)),
            StudyEstimator::MultiplicativeEffect(e) => point(*e) / point(Self::reference(*e)),
        }
    }

    fn evaluate(
        &self,
        data: &TrialData,
        nuis: &NuisanceSet,
        alpha: f64,
    ) -> Result<EstimateReport> {
        match self {
            StudyEstimator::Point(e) => one_step(*e, data, nuis, alpha),
            StudyEstimator::AdditiveEffect(e) => {
                let e1 = one_step(*e, data, nuis, alpha)?;
                let e0 = one_step(Self::reference(*e), data, nuis, alpha)?;
                contrast(&e1, &e0, ContrastScale::Additive, alpha)
            }
            StudyEstimator::MultiplicativeEffect(e) => {
                let e1 = one_step(*e, data, nuis, alpha)?;
                let e0 = one_step(Self::reference(*e), data, nuis, alpha)?;
                contrast(&e1, &e0, ContrastScale::Multiplicative, alpha)
            }
        }
    }
}

/// Configuration of a replication study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub dgp: DgpSpec,
    pub replicates: usize,
    pub estimators: Vec<StudyEstimator>,
    #[serde(default)]
    pub nuisance: NuisanceConfig,
    #[serde(default)]
    pub known_propensity: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Draws for the Monte-Carlo truth oracle (calibrated design).
    #[serde(default = "default_truth_draws")]
    pub truth_draws: usize,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_truth_draws() -> usize {
    1_000_000
}

/// Aggregated performance of one estimator across replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub estimator: String,
    pub truth: f64,
    pub mean_point: f64,
    /// `√n · mean(point − truth)`.
    pub scaled_bias: f64,
    /// `n · var(point)` and `n · mean((point − truth)²)`.
    pub scaled_variance: f64,
    pub scaled_mse: f64,
    /// Fraction of replicate CIs containing the truth.
    pub coverage: f64,
    /// Fraction of replicates rejecting the no-effect null at level α.
    pub rejection_rate: f64,
    pub replicates_used: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyResult {
    pub n: usize,
    pub replicates: usize,
    pub failed_replicates: usize,
    pub truth: TruthRecord,
    pub metrics: Vec<EstimatorMetrics>,
    pub warnings: Vec<Warning>,
}

impl StudyResult {
    /// Metrics for an estimator by label.
    pub fn metric(&self, label: &str) -> Option<&EstimatorMetrics> {
        self.metrics.iter().find(|m| m.estimator == label)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "estimator",
            "truth",
            "mean_point",
            "scaled_bias",
            "scaled_variance",
            "scaled_mse",
            "coverage",
            "rejection_rate",
            "replicates_used",
        ])
        .map_err(|e| Error::Csv {
            location: "study result".into(),
            message: e.to_string(),
        })?;
        for m in &self.metrics {
            w.write_record([
                m.estimator.clone(),
                m.truth.to_string(),
                m.mean_point.to_string(),
                m.scaled_bias.to_string(),
                m.scaled_variance.to_string(),
                m.scaled_mse.to_string(),
                m.coverage.to_string(),
                m.rejection_rate.to_string(),
                m.replicates_used.to_string(),
            ])
            .map_err(|e| Error::Csv {
                location: "study result".into(),
                message: e.to_string(),
            })?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<csv writer>".into(),
            source: e,
        })?;
        Ok(())
    }
}

/// The truth oracle appropriate for a design: exact enumeration when the
/// covariate support is discrete, Monte Carlo otherwise.
pub fn truth_for(spec: &StudySpec) -> Result<TruthRecord> {
    match spec.dgp.design {
        StudyDesign::Asymptotics { .. } => truth_exact(&spec.dgp.design),
        StudyDesign::ProvideCalibrated { .. } => {
            truth_monte_carlo(&spec.dgp.design, spec.truth_draws, spec.dgp.seed ^ 0x5eed)
        }
    }
}

/// Runs a replication study: generates `replicates` independent trials on
/// replicate-indexed streams, applies every estimator, and aggregates the
/// scaled performance metrics against the truth oracle. Replicates where any
/// estimator fails (e.g. an empty cell at small n) are excluded and counted.
pub fn run_study(spec: &StudySpec) -> Result<StudyResult> {
    if spec.replicates == 0 {
        return Err(Error::Config("study requires replicates >= 1".into()));
    }
    if spec.estimators.is_empty() {
        return Err(Error::Config("study requires at least one estimator".into()));
    }
    let truth = truth_for(spec)?;
    let per_rep: Vec<Option<Vec<(f64, f64, f64, f64)>>> = (0..spec.replicates)
        .into_par_iter()
        .map(|rep| {
            let (data, _) = generate_stream(&spec.dgp, rep as u64 + 1).ok()?;
            let nuis = NuisanceSet::fit(&data, &spec.nuisance, spec.known_propensity).ok()?;
            spec.estimators
                .iter()
                .map(|est| {
                    est.evaluate(&data, &nuis, spec.alpha)
                        .ok()
                        .map(|r| (r.point, r.ci_lower, r.ci_upper, r.p_value))
                })
                .collect()
        })
        .collect();

    let used: Vec<&Vec<(f64, f64, f64, f64)>> = per_rep.iter().flatten().collect();
    let failed = spec.replicates - used.len();
    if used.is_empty() {
        return Err(Error::Config(format!(
            "all {} replicates failed",
            spec.replicates
        )));
    }
    let n = spec.dgp.n as f64;
    let mut metrics = Vec::new();
    for (k, est) in spec.estimators.iter().enumerate() {
        let target = est.truth(&truth);
        let points: Vec<f64> = used.iter().map(|r| r[k].0).collect();
        let mean_point = kahan_mean(&points);
        let bias = mean_point - target;
        let variance = crate::onestep::sample_variance(&points);
        let mse = kahan_mean(&points.iter().map(|p| (p - target) * (p - target)).collect::<Vec<_>>());
        let coverage = used
            .iter()
            .filter(|r| r[k].1 <= target && target <= r[k].2)
            .count() as f64
            / used.len() as f64;
        let rejection_rate = used.iter().filter(|r| r[k].3 < spec.alpha).count() as f64
            / used.len() as f64;
        metrics.push(EstimatorMetrics {
            estimator: est.label(),
            truth: target,
            mean_point,
            scaled_bias: bias * n.sqrt(),
            scaled_variance: variance * n,
            scaled_mse: mse * n,
            coverage,
            rejection_rate,
            replicates_used: used.len(),
        });
    }
    Ok(StudyResult {
        n: spec.dgp.n,
        replicates: spec.replicates,
        failed_replicates: failed,
        truth,
        metrics,
        warnings: Vec::new(),
    })
}

/// Aggregated performance of the bound estimators across replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsStudyResult {
    pub n: usize,
    pub replicates: usize,
    pub failed_replicates: usize,
    pub truth_lower: f64,
    pub truth_upper: f64,
    pub truth_psi1: f64,
    pub bias_lower: f64,
    pub bias_upper: f64,
    /// CI coverage of the true bound endpoints (requires bootstrap_b > 0).
    pub coverage_lower: f64,
    pub coverage_upper: f64,
    /// Fraction of replicates whose interval `[ℓ_n, u_n]` contains the true
    /// treated Naturally-Infected mean.
    pub effect_coverage: f64,
    pub median_width: f64,
    pub width_iqr: (f64, f64),
}

/// Replication study for the unadjusted bounds. `bootstrap_b = 0` skips the
/// bootstrap (endpoint CIs are then reported as non-covering).
pub fn run_bounds_study(
    dgp: &DgpSpec,
    replicates: usize,
    bootstrap_b: usize,
) -> Result<BoundsStudyResult> {
    let truth = truth_exact(&matches!(dgp.design, StudyDesign::Asymptotics { .. })
        .then_some(dgp.design)
        .ok_or(Error::ExactTruthUnsupported)?)?;
    let (t_lo, t_hi) = (truth.bound_lower.unwrap(), truth.bound_upper.unwrap());
    let per_rep: Vec<Option<(f64, f64, bool, bool)>> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let (data, _) = generate_stream(dgp, rep as u64 + 1).ok()?;
            if bootstrap_b == 0 {
                let b = bounds_unadjusted(&data).ok()?;
                return Some((b.lower, b.upper, false, false));
            }
            let b = crate::bounds::bounds_bootstrap(
                &data,
                &crate::bounds::BootstrapSpec {
                    replicates: bootstrap_b,
                    seed: dgp.seed ^ (rep as u64).wrapping_mul(0x9e3779b97f4a7c15),
                    alpha: 0.05,
                    covariates: Vec::new(),
                },
            )
            .ok()?;
            let (llo, lhi) = b.ci_lower.unwrap();
            let (ulo, uhi) = b.ci_upper.unwrap();
            Some((
                b.lower,
                b.upper,
                llo <= t_lo && t_lo <= lhi,
                ulo <= t_hi && t_hi <= uhi,
            ))
        })
        .collect();
    let used: Vec<&(f64, f64, bool, bool)> = per_rep.iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::Config(format!("all {replicates} replicates failed")));
    }
    let m = used.len() as f64;
    let lowers: Vec<f64> = used.iter().map(|r| r.0).collect();
    let uppers: Vec<f64> = used.iter().map(|r| r.1).collect();
    let mut widths: Vec<f64> = used.iter().map(|r| r.1 - r.0).collect();
    widths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |p: f64| widths[((p * widths.len() as f64).ceil() as usize).clamp(1, widths.len()) - 1];
    Ok(BoundsStudyResult {
        n: dgp.n,
        replicates,
        failed_replicates: replicates - used.len(),
        truth_lower: t_lo,
        truth_upper: t_hi,
        truth_psi1: truth.psi1,
        bias_lower: kahan_mean(&lowers) - t_lo,
        bias_upper: kahan_mean(&uppers) - t_hi,
        coverage_lower: used.iter().filter(|r| r.2).count() as f64 / m,
        coverage_upper: used.iter().filter(|r| r.3).count() as f64 / m,
        effect_coverage: used
            .iter()
            .filter(|r| r.0 <= truth.psi1 && truth.psi1 <= r.1)
            .count() as f64
            / m,
        median_width: pct(0.5),
        width_iqr: (pct(0.25), pct(0.75)),
    })
}

/// Configuration of a power surface over the calibrated design's effect grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSpec {
    pub delta_i: f64,
    pub delta_p: f64,
    pub eta_d_grid: Vec<f64>,
    pub eta_p_grid: Vec<f64>,
    pub estimators: Vec<StudyEstimator>,
    pub replicates: usize,
    #[serde(default = "default_power_n")]
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub nuisance: NuisanceConfig,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_mapping_draws")]
    pub mapping_draws: usize,
}

fn default_power_n() -> usize {
    700
}

fn default_mapping_draws() -> usize {
    100_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerCell {
    pub eta_d: f64,
    pub eta_p: f64,
    pub rd_d: f64,
    pub rd_p: f64,
    /// Rejection rates aligned with the spec's estimator list.
    pub rejection: Vec<f64>,
    pub failed_replicates: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerSurface {
    pub estimators: Vec<String>,
    pub cells: Vec<PowerCell>,
}

impl PowerSurface {
    /// Contour-ready long-format CSV:
    /// `eta_d,eta_p,rd_d,rd_p,estimator,rejection_rate`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::Csv {
            location: "power surface".into(),
            message: e.to_string(),
        };
        w.write_record(["eta_d", "eta_p", "rd_d", "rd_p", "estimator", "rejection_rate"])
            .map_err(err)?;
        for cell in &self.cells {
            for (est, rate) in self.estimators.iter().zip(&cell.rejection) {
                w.write_record([
                    cell.eta_d.to_string(),
                    cell.eta_p.to_string(),
                    cell.rd_d.to_string(),
                    cell.rd_p.to_string(),
                    est.clone(),
                    rate.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::Io {
            path: "<csv writer>".into(),
            source: e,
        })?;
        Ok(())
    }
}

/// Rejection rate of the two-sided level-α Wald test of no effect, per
/// estimator, per `(η_D, η_P)` grid cell, on the calibrated design.
pub fn power_surface(spec: &PowerSpec) -> Result<PowerSurface> {
    if spec.eta_d_grid.is_empty() || spec.eta_p_grid.is_empty() {
        return Err(Error::Config("power grid is empty".into()));
    }
    let mut cells = Vec::new();
    for &eta_d in &spec.eta_d_grid {
        for &eta_p in &spec.eta_p_grid {
            let design = StudyDesign::ProvideCalibrated {
                delta_i: spec.delta_i,
                delta_p: spec.delta_p,
                eta_d,
                eta_p,
                nb_variance_ratio: default_nb_ratio(),
            };
            let (rd_d, rd_p) = stratum_rd_mapping(&design, spec.mapping_draws, spec.seed)?;
            // Decorrelate streams across grid cells through the seed.
            let cell_seed = spec
                .seed
                .wrapping_add((eta_d.to_bits() ^ eta_p.to_bits().rotate_left(17)) | 1);
            let per_rep: Vec<Option<Vec<bool>>> = (0..spec.replicates)
                .into_par_iter()
                .map(|rep| {
                    let dgp = DgpSpec {
                        design,
                        n: spec.n,
                        seed: cell_seed,
                    };
                    let (data, _) = generate_stream(&dgp, rep as u64 + 1).ok()?;
                    let nuis =
                        NuisanceSet::fit(&data, &spec.nuisance, Some(0.5)).ok()?;
                    spec.estimators
                        .iter()
                        .map(|est| {
                            est.evaluate(&data, &nuis, spec.alpha)
                                .ok()
                                .map(|r| r.p_value < spec.alpha)
                        })
                        .collect()
                })
                .collect();
            let used: Vec<&Vec<bool>> = per_rep.iter().flatten().collect();
            if used.is_empty() {
                return Err(Error::Config(format!(
                    "all replicates failed at grid cell eta_d={eta_d}, eta_p={eta_p}"
                )));
            }
            let rejection: Vec<f64> = (0..spec.estimators.len())
                .map(|k| used.iter().filter(|r| r[k]).count() as f64 / used.len() as f64)
                .collect();
            cells.push(PowerCell {
                eta_d,
                eta_p,
                rd_d,
                rd_p,
                rejection,
                failed_replicates: spec.replicates - used.len(),
            });
        }
    }
    Ok(PowerSurface {
        estimators: spec.estimators.iter().map(|e| e.label()).collect(),
        cells,
    })
}
