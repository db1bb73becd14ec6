//! Synthetic data from the fitted model with known ground truth, and an
//! exact enumeration posterior for tiny intercept-only problems.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    cell_of, derive_eligibility, CovariateKind, CovariateSpec, CovariateValue, Dataset, Stratum,
    UnitRecord,
};
use crate::error::{Error, Result};
use crate::estimands::{population_effects, PopulationEffects};
use crate::kernel::{ln_std_normal_cdf, sample_truncated_normal, RngStream};
use crate::strata::{
    outcome_probability, strata_probabilities, BlockCoef, Design, ModelVariant, OutcomeBlock,
    OutcomeParams, StrataParams, StrataPriors,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ForcingLaw {
    /// Uniform on `[s0 - h, s0 + h]`.
    UniformWindow,
    /// Normal restricted to `[s0 - h, s0 + h]`.
    TruncatedNormal { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    Normal {
        mean: f64,
        sd: f64,
    },
    Bernoulli {
        p: f64,
    },
    /// Probabilities in declared level order.
    Categorical {
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateGenerator {
    pub spec: CovariateSpec,
    pub law: CovariateLaw,
    /// Mean shift applied to eligible units (normal law only). Nonzero
    /// values break local randomization on purpose.
    #[serde(default)]
    pub eligible_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub s0: f64,
    pub h: f64,
    pub scale: f64,
    pub forcing_law: ForcingLaw,
    pub covariates: Vec<CovariateGenerator>,
    pub true_strata: StrataParams,
    pub true_outcome: OutcomeParams,
    pub seed: u64,
}

impl SynthConfig {
    /// A calibrated configuration with strata shares near (.33, .05, .62),
    /// an always-applicant effect near -0.16 and one standard normal covariate.
    pub fn reference(n: usize, seed: u64) -> Self {
        let mut outcome = OutcomeParams::zeros(1);
        outcome.aa0 = BlockCoef {
            intercept: 0.05,
            forcing: 0.1,
        };
        outcome.aa1 = BlockCoef {
            intercept: -0.37,
            forcing: 0.1,
        };
        outcome.ca0 = BlockCoef {
            intercept: 0.0,
            forcing: 0.1,
        };
        outcome.ca1 = BlockCoef {
            intercept: -0.1,
            forcing: 0.1,
        };
        outcome.na = BlockCoef {
            intercept: 0.2,
            forcing: 0.1,
        };
        outcome.shared_slopes = vec![0.2];
        Self {
            n,
            s0: 15_000.0,
            h: 1000.0,
            scale: 1000.0,
            forcing_law: ForcingLaw::UniformWindow,
            covariates: vec![CovariateGenerator {
                spec: CovariateSpec::continuous("x1"),
                law: CovariateLaw::Normal { mean: 0.0, sd: 1.0 },
                eligible_shift: 0.0,
            }],
            true_strata: StrataParams {
                alpha_aa: vec![0.44, 0.1, 0.1],
                alpha_na: vec![-1.44, -0.1, 0.1],
            },
            true_outcome: outcome,
            seed,
        }
    }

    /// Number of covariate slots in the model design.
    pub fn slots(&self) -> usize {
        self.covariates.iter().map(|c| c.spec.width()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.n == 0 {
            return bad("n", "must be at least 1".into());
        }
        if !self.s0.is_finite() {
            return bad("s0", "must be finite".into());
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad("h", format!("must be positive, got {}", self.h));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad("scale", format!("must be positive, got {}", self.scale));
        }
        if let ForcingLaw::TruncatedNormal { mean, sd } = self.forcing_law {
            if !mean.is_finite() || !(sd > 0.0 && sd.is_finite()) {
                return bad("forcing_law", "needs a finite mean and positive sd".into());
            }
        }
        for c in &self.covariates {
            c.spec.validate()?;
            let name = &c.spec.name;
            let ok = match (&c.law, c.spec.kind) {
                (CovariateLaw::Normal { mean, sd }, CovariateKind::Continuous) => {
                    mean.is_finite() && *sd > 0.0 && sd.is_finite()
                }
                (CovariateLaw::Bernoulli { p }, CovariateKind::Binary) => (0.0..=1.0).contains(p),
                (CovariateLaw::Categorical { probs }, CovariateKind::Categorical) => {
                    probs.len() == c.spec.levels.len()
                        && probs.iter().all(|p| *p >= 0.0 && p.is_finite())
                        && probs.iter().sum::<f64>() > 0.0
                }
                _ => false,
            };
            if !ok {
                return bad(
                    &format!("covariates.{name}"),
                    "law does not fit the covariate kind".into(),
                );
            }
            let shift_ok = c.eligible_shift == 0.0
                || (c.eligible_shift.is_finite() && matches!(c.law, CovariateLaw::Normal { .. }));
            if !shift_ok {
                return bad(
                    &format!("covariates.{name}"),
                    "eligible_shift needs a normal law".into(),
                );
            }
        }
        let k = 2 + self.slots();
        let lens = [
            ("true_strata.alpha_aa", self.true_strata.alpha_aa.len(), k),
            ("true_strata.alpha_na", self.true_strata.alpha_na.len(), k),
            (
                "true_outcome.shared_slopes",
                self.true_outcome.shared_slopes.len(),
                k - 2,
            ),
        ];
        for (field, got, want) in lens {
            if got != want {
                return bad(field, format!("expected {want} coefficients, got {got}"));
            }
        }
        let o = &self.true_outcome;
        let finite = self
            .true_strata
            .alpha_aa
            .iter()
            .chain(&self.true_strata.alpha_na)
            .all(|v| v.is_finite())
            && o.shared_slopes.iter().all(|v| v.is_finite())
            && OutcomeBlock::ALL.iter().all(|&b| {
                let c = o.block(b);
                c.intercept.is_finite() && c.forcing.is_finite()
            });
        if !finite {
            return bad("true parameters", "must be finite".into());
        }
        Ok(())
    }
}

/// Potential quantities of one generated unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitTruth {
    pub g: Stratum,
    pub a0: bool,
    pub a1: bool,
    pub y0: bool,
    pub y1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub seed: u64,
    /// Population quantities at the true parameters, averaged over the
    /// generated units at their own forcing values.
    pub population: PopulationEffects,
    /// The same at `S* = 0`.
    pub population_at_s0: PopulationEffects,
    /// Realized `N_g / n`.
    pub sample_shares: [f64; 3],
    /// Realized mean of `Y(1) - Y(0)` in AA, CA and their union.
    pub sample_effects: [Option<f64>; 3],
    pub units: Vec<UnitTruth>,
}

/// Draws a dataset and its potential outcomes.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, SynthTruth)> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed, 0);
    let (lo, hi) = (cfg.s0 - cfg.h, cfg.s0 + cfg.h);
    let width = cfg.n.to_string().len();
    let mut units = Vec::with_capacity(cfg.n);
    let mut truth = Vec::with_capacity(cfg.n);
    let mut slots = Vec::with_capacity(cfg.slots());
    for i in 0..cfg.n {
        let forcing = match cfg.forcing_law {
            ForcingLaw::UniformWindow => rng.random_range(lo..=hi),
            ForcingLaw::TruncatedNormal { mean, sd } => {
                sample_truncated_normal(&mut rng, mean, sd, lo, hi)?
            }
        };
        let z = derive_eligibility(forcing, cfg.s0)?;
        let sstar = (forcing - cfg.s0) / cfg.scale;

        let mut covariates = Vec::with_capacity(cfg.covariates.len());
        slots.clear();
        for c in &cfg.covariates {
            let v = match &c.law {
                CovariateLaw::Normal { mean, sd } => {
                    let shift = if z { c.eligible_shift } else { 0.0 };
                    let normal =
                        Normal::new(mean + shift, *sd).map_err(|e| Error::Config(e.to_string()))?;
                    CovariateValue::Real(normal.sample(&mut rng))
                }
                CovariateLaw::Bernoulli { p } => CovariateValue::Bit(rng.random::<f64>() < *p),
                CovariateLaw::Categorical { probs } => {
                    CovariateValue::Level(crate::kernel::sample_categorical(&mut rng, probs)?)
                }
            };
            push_slots(&c.spec, &v, &mut slots);
            covariates.push(v);
        }

        let pi = strata_probabilities(sstar, &slots, &cfg.true_strata);
        let u: f64 = rng.random();
        let g = if u < pi.aa {
            Stratum::AA
        } else if u < pi.aa + pi.na {
            Stratum::NA
        } else {
            Stratum::CA
        };
        let p0 = outcome_probability(g, false, sstar, &slots, &cfg.true_outcome);
        let p1 = outcome_probability(g, true, sstar, &slots, &cfg.true_outcome);
        let y0 = rng.random::<f64>() < p0;
        let y1 = rng.random::<f64>() < p1;
        let t = UnitTruth {
            g,
            a0: g.applies(false),
            a1: g.applies(true),
            y0,
            y1,
        };
        let applied = if z { t.a1 } else { t.a0 };
        units.push(UnitRecord {
            id: format!("u{:0width$}", i + 1),
            forcing,
            applied,
            received: z && applied,
            outcome: if z { y1 } else { y0 },
            covariates,
        });
        truth.push(t);
    }
    let spec = cfg.covariates.iter().map(|c| c.spec.clone()).collect();
    let dataset = Dataset::new(spec, units, cfg.s0, cfg.scale)?;
    let design = Design::new(&dataset, ModelVariant::default());
    let population = population_effects(&cfg.true_strata, &cfg.true_outcome, &design, false)?;
    let population_at_s0 = population_effects(&cfg.true_strata, &cfg.true_outcome, &design, true)?;

    let n = cfg.n as f64;
    let share = |s: Stratum| truth.iter().filter(|t| t.g == s).count() as f64 / n;
    let effect = |keep: &dyn Fn(Stratum) -> bool| {
        let sel: Vec<&UnitTruth> = truth.iter().filter(|t| keep(t.g)).collect();
        (!sel.is_empty()).then(|| {
            sel.iter()
                .map(|t| f64::from(u8::from(t.y1)) - f64::from(u8::from(t.y0)))
                .sum::<f64>()
                / sel.len() as f64
        })
    };
    let sample_effects = [
        effect(&|g| g == Stratum::AA),
        effect(&|g| g == Stratum::CA),
        effect(&|g| g != Stratum::NA),
    ];
    Ok((
        dataset,
        SynthTruth {
            seed: cfg.seed,
            population,
            population_at_s0,
            sample_shares: [share(Stratum::AA), share(Stratum::CA), share(Stratum::NA)],
            sample_effects,
            units: truth,
        },
    ))
}

fn push_slots(spec: &CovariateSpec, v: &CovariateValue, out: &mut Vec<f64>) {
    match v {
        CovariateValue::Real(r) => out.push(*r),
        CovariateValue::Bit(b) => out.push(f64::from(u8::from(*b))),
        CovariateValue::Level(k) => {
            let order = spec.ordered_levels();
            out.extend(
                order[..order.len() - 1]
                    .iter()
                    .map(|&l| if l == *k { 1.0 } else { 0.0 }),
            );
        }
    }
}

/// Largest dataset the enumeration oracle accepts.
pub const ORACLE_MAX_UNITS: usize = 12;

/// Trapezoid grid over `±half_width_sd` prior standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub points: usize,
    pub half_width_sd: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            points: 4001,
            half_width_sd: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMoments {
    pub name: String,
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OraclePosterior {
    /// Per unit: posterior probabilities of AA, CA and NA.
    pub strata: Vec<[f64; 3]>,
    pub coefficients: Vec<CoefficientMoments>,
    pub configurations: usize,
}

impl OraclePosterior {
    pub fn probability(&self, unit: usize, g: Stratum) -> f64 {
        self.strata[unit][stratum_slot(g)]
    }
}

fn stratum_slot(g: Stratum) -> usize {
    match g {
        Stratum::AA => 0,
        Stratum::CA => 1,
        Stratum::NA => 2,
    }
}

/// `∫ Φ(-θ)^p Φ(θ)^q N(θ; 0, v) dθ` on a fixed grid, with its first two
/// moments, all memoized by `(p, q)`.
struct BinaryIntegrals {
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
    cache: HashMap<(usize, usize), (f64, f64, f64)>,
}

impl BinaryIntegrals {
    fn new(var: f64, q: QuadratureSpec) -> Self {
        let sd = var.sqrt();
        let half = q.half_width_sd * sd;
        let step = 2.0 * half / (q.points - 1) as f64;
        let nodes: Vec<f64> = (0..q.points).map(|k| -half + k as f64 * step).collect();
        let log_weights = nodes
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let end = if k == 0 || k + 1 == q.points {
                    0.5
                } else {
                    1.0
                };
                (end * step).ln()
                    - 0.5 * t * t / var
                    - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
            })
            .collect();
        Self {
            nodes,
            log_weights,
            cache: HashMap::new(),
        }
    }

    /// (log integral, posterior mean, posterior second moment).
    fn get(&mut self, p: usize, q: usize) -> (f64, f64, f64) {
        if let Some(v) = self.cache.get(&(p, q)) {
            return *v;
        }
        let logs: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.log_weights)
            .map(|(&t, &lw)| {
                lw + p as f64 * ln_std_normal_cdf(-t) + q as f64 * ln_std_normal_cdf(t)
            })
            .collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for (&t, &l) in self.nodes.iter().zip(&logs) {
            let w = (l - m).exp();
            s0 += w;
            s1 += w * t;
            s2 += w * t * t;
        }
        let v = (m + s0.ln(), s1 / s0, s2 / s0);
        self.cache.insert((p, q), v);
        v
    }
}

/// Exact posterior of the intercept-only model by enumerating every strata
/// configuration of the ambiguous units.
///
/// Given a configuration, the likelihood factorizes into one-dimensional
/// probit integrals for each strata probit and each outcome block.
pub fn brute_force_posterior(
    dataset: &Dataset,
    priors: &StrataPriors,
    quadrature: QuadratureSpec,
) -> Result<OraclePosterior> {
    priors.validate()?;
    let n = dataset.len();
    if n > ORACLE_MAX_UNITS {
        return Err(Error::Precondition(format!(
            "enumeration oracle is limited to {ORACLE_MAX_UNITS} units, got {n}"
        )));
    }
    if quadrature.points < 3 || !(quadrature.half_width_sd > 0.0) {
        return Err(Error::Config(
            "quadrature needs at least 3 points and a positive width".into(),
        ));
    }
    let cells: Vec<_> = (0..n).map(|i| dataset.cell(i)).collect();
    let outcomes: Vec<bool> = dataset.units().iter().map(|u| u.outcome).collect();
    let ambiguous: Vec<usize> = (0..n).filter(|&i| cells[i].is_ambiguous()).collect();

    let mut alpha = BinaryIntegrals::new(priors.alpha_var, quadrature);
    let mut beta = BinaryIntegrals::new(priors.beta_var, quadrature);

    let configs = 1usize << ambiguous.len();
    let mut log_w = Vec::with_capacity(configs);
    // Per configuration: means and second moments of the seven coefficients.
    let mut moments = Vec::with_capacity(configs);
    let mut g = vec![Stratum::NA; n];
    for mask in 0..configs {
        for i in 0..n {
            g[i] = cells[i].compatible[0];
        }
        for (bit, &i) in ambiguous.iter().enumerate() {
            g[i] = cells[i].compatible[(mask >> bit) & 1];
        }
        let count = |s: Stratum| g.iter().filter(|&&x| x == s).count();
        let (n_aa, n_ca, n_na) = (count(Stratum::AA), count(Stratum::CA), count(Stratum::NA));
        // Successes and failures per outcome block.
        let mut yes = [0usize; 5];
        let mut no = [0usize; 5];
        for i in 0..n {
            let b = OutcomeBlock::ALL
                .iter()
                .position(|&b| b == OutcomeBlock::of(g[i], cells[i].z))
                .expect("block");
            if outcomes[i] {
                yes[b] += 1;
            } else {
                no[b] += 1;
            }
        }
        // Pr(AA) = Φ(-a), Pr(NA | not AA) = Φ(-b).
        let ia = alpha.get(n_aa, n_ca + n_na);
        let ib = alpha.get(n_na, n_ca);
        let mut lw = ia.0 + ib.0;
        let mut m = vec![(ia.1, ia.2), (ib.1, ib.2)];
        for b in 0..5 {
            let ib = beta.get(no[b], yes[b]);
            lw += ib.0;
            m.push((ib.1, ib.2));
        }
        log_w.push(lw);
        moments.push(m);
    }
    let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numerical("oracle weights vanished".into()));
    }

    let mut strata = vec![[0.0; 3]; n];
    for (i, c) in cells.iter().enumerate() {
        if !c.is_ambiguous() {
            strata[i][stratum_slot(c.compatible[0])] = 1.0;
        }
    }
    for (bit, &i) in ambiguous.iter().enumerate() {
        for (mask, wm) in w.iter().enumerate() {
            let s = cells[i].compatible[(mask >> bit) & 1];
            strata[i][stratum_slot(s)] += wm / total;
        }
    }
    let names = [
        "alpha_AA", "alpha_NA", "beta_AA0", "beta_AA1", "beta_CA0", "beta_CA1", "beta_NA",
    ];
    let coefficients = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mean: f64 = w
                .iter()
                .zip(&moments)
                .map(|(wm, m)| wm * m[k].0)
                .sum::<f64>()
                / total;
            let second: f64 = w
                .iter()
                .zip(&moments)
                .map(|(wm, m)| wm * m[k].1)
                .sum::<f64>()
                / total;
            CoefficientMoments {
                name: name.to_string(),
                mean,
                var: second - mean * mean,
            }
        })
        .collect();
    Ok(OraclePosterior {
        strata,
        coefficients,
        configurations: configs,
    })
}

/// Indices of units whose observed cell admits two strata.
pub fn ambiguous_units(dataset: &Dataset) -> Vec<usize> {
    (0..dataset.len())
        .filter(|&i| cell_of(dataset.z(i), dataset.units()[i].applied).is_ambiguous())
        .collect()
}
