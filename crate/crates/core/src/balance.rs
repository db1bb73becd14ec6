//! Hierarchical spike-and-slab model for covariate balance across the
//! eligibility threshold.
//!
//! Every covariate component `c` is a regression on eligibility,
//! `X*_ic = γ0c + γ1c Z_i + ε_ic`, where `X*` is the standardized value of a
//! continuous covariate (noise variance `σ²_c`) or a unit-variance latent
//! utility for binary and categorical covariates. Categorical covariates use a
//! sequential probit over their levels (declared order, baseline last): level
//! `k` is observed when components `1..k-1` are positive and component `k` is
//! non-positive, the baseline when all components are positive.
//!
//! Each `γ1c` has prior `π δ0 + (1 - π) N(μ1, σ1²)` and `γ0c ~ N(μ0, σ0²)`, with
//! hyperpriors on `(μ0, σ0², μ1, σ1², π)` shared across covariates. A
//! covariate is balanced in a draw when all of its `γ1` components sit in the
//! point mass; the fraction of such draws is its posterior zero probability.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{filter_bandwidth, CovariateKind, CovariateValue, Dataset};
use crate::error::{Error, Result};
use crate::kernel::{
    logistic, sample_beta, sample_inverse_gamma, sample_truncated_normal, ChainConfig,
    GaussianPosterior, RegressionStats, RngStream,
};

/// Reference floor for "well balanced" zero probabilities.
pub const REFERENCE_FLOOR: f64 = 0.8;
/// Default floor used by [`recommend_bandwidths`].
pub const DEFAULT_FLOOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalancePriors {
    /// Inverse-gamma (shape, rate) for continuous noise variances.
    pub ig_a: f64,
    pub ig_b: f64,
    pub mu0_mean: f64,
    pub mu0_var: f64,
    pub var0_a: f64,
    pub var0_b: f64,
    pub mu1_mean: f64,
    pub mu1_var: f64,
    pub var1_a: f64,
    pub var1_b: f64,
    /// Beta hyperprior on the point-mass probability.
    pub pi_a: f64,
    pub pi_b: f64,
}

impl Default for BalancePriors {
    fn default() -> Self {
        Self {
            ig_a: 1.0,
            ig_b: 1.0,
            mu0_mean: 0.0,
            mu0_var: 100.0,
            var0_a: 1.0,
            var0_b: 1.0,
            mu1_mean: 0.0,
            mu1_var: 100.0,
            var1_a: 1.0,
            var1_b: 1.0,
            pi_a: 1.0,
            pi_b: 1.0,
        }
    }
}

impl BalancePriors {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ig_a", self.ig_a),
            ("ig_b", self.ig_b),
            ("mu0_var", self.mu0_var),
            ("var0_a", self.var0_a),
            ("var0_b", self.var0_b),
            ("mu1_var", self.mu1_var),
            ("var1_a", self.var1_a),
            ("var1_b", self.var1_b),
            ("pi_a", self.pi_a),
            ("pi_b", self.pi_b),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "balance prior {name} must be positive, got {v}"
                )));
            }
        }
        if !self.mu0_mean.is_finite() || !self.mu1_mean.is_finite() {
            return Err(Error::Config("balance prior means must be finite".into()));
        }
        Ok(())
    }
}

/// Shared hyperparameters of the balance model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceHyper {
    pub mu0: f64,
    pub var0: f64,
    pub mu1: f64,
    pub var1: f64,
    pub pi: f64,
}

/// Options that hold parts of the model fixed, used for exact cross-checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BalanceOptions {
    /// Keep the hyperparameters at these values instead of sampling them.
    pub fixed_hyper: Option<BalanceHyper>,
    /// Keep continuous noise variances at this value.
    pub fixed_sigma2: Option<f64>,
}

/// One covariate's parameters in a retained draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateDraw {
    pub name: String,
    pub gamma0: Vec<f64>,
    pub gamma1: Vec<f64>,
    /// `true` exactly when the paired `gamma1` entry is 0.
    pub spike: Vec<bool>,
    /// Noise variance, continuous covariates only.
    pub sigma2: Option<f64>,
}

/// Retained state of the balance sampler. Latent utilities are part of the
/// running chain but are not stored per draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceState {
    pub iteration: usize,
    pub covariates: Vec<CovariateDraw>,
    pub hyper: BalanceHyper,
}

enum Response {
    /// Observed standardized values.
    Gaussian(Vec<f64>),
    /// Latent utilities with their sign constraint (`true`: positive).
    Latent {
        positive: Vec<bool>,
        values: Vec<f64>,
    },
}

/// One regression component: its risk set and response.
struct Component {
    z: Vec<bool>,
    response: Response,
}

impl Component {
    fn y(&self) -> &[f64] {
        match &self.response {
            Response::Gaussian(v) => v,
            Response::Latent { values, .. } => values,
        }
    }

    fn stats(&self) -> RegressionStats {
        let mut st = RegressionStats::zeros(2);
        let (mut n1, mut sy, mut sy1, mut syy) = (0.0, 0.0, 0.0, 0.0);
        for (&z, &y) in self.z.iter().zip(self.y()) {
            sy += y;
            syy += y * y;
            if z {
                n1 += 1.0;
                sy1 += y;
            }
        }
        let n = self.z.len();
        st.xtx[(0, 0)] = n as f64;
        st.xtx[(0, 1)] = n1;
        st.xtx[(1, 0)] = n1;
        st.xtx[(1, 1)] = n1;
        st.xty[0] = sy;
        st.xty[1] = sy1;
        st.yty = syy;
        st.n = n;
        st
    }
}

struct CovariateModel {
    name: String,
    continuous: bool,
    components: Vec<Component>,
}

fn build_models(dataset: &Dataset) -> Vec<CovariateModel> {
    let z: Vec<bool> = (0..dataset.len()).map(|i| dataset.z(i)).collect();
    dataset
        .spec()
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let values = dataset.units().iter().map(|u| u.covariates[j]);
            let components = match spec.kind {
                CovariateKind::Continuous => {
                    let raw: Vec<f64> = values
                        .map(|v| match v {
                            CovariateValue::Real(x) => x,
                            _ => unreachable!("validated dataset"),
                        })
                        .collect();
                    vec![Component {
                        z: z.clone(),
                        response: Response::Gaussian(standardize(&raw)),
                    }]
                }
                CovariateKind::Binary => {
                    let positive: Vec<bool> = values
                        .map(|v| match v {
                            CovariateValue::Bit(b) => b,
                            _ => unreachable!("validated dataset"),
                        })
                        .collect();
                    let n = positive.len();
                    vec![Component {
                        z: z.clone(),
                        response: Response::Latent {
                            positive,
                            values: vec![0.0; n],
                        },
                    }]
                }
                CovariateKind::Categorical => {
                    let order = spec.ordered_levels();
                    let mut rank = vec![0usize; order.len()];
                    for (r, &k) in order.iter().enumerate() {
                        rank[k] = r;
                    }
                    let ranks: Vec<usize> = values
                        .map(|v| match v {
                            CovariateValue::Level(k) => rank[k],
                            _ => unreachable!("validated dataset"),
                        })
                        .collect();
                    (0..spec.width())
                        .map(|c| {
                            let at_risk: Vec<usize> =
                                (0..ranks.len()).filter(|&i| ranks[i] >= c).collect();
                            Component {
                                z: at_risk.iter().map(|&i| z[i]).collect(),
                                response: Response::Latent {
                                    positive: at_risk.iter().map(|&i| ranks[i] > c).collect(),
                                    values: vec![0.0; at_risk.len()],
                                },
                            }
                        })
                        .collect()
                }
            };
            CovariateModel {
                name: spec.name.clone(),
                continuous: spec.kind == CovariateKind::Continuous,
                components,
            }
        })
        .collect()
}

/// Centers and scales by the pooled sample moments.
fn standardize(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    x.iter().map(|v| (v - mean) / sd).collect()
}

/// Runs one balance chain on a bandwidth subset and returns the retained draws.
pub fn run_balance_chain<R: Rng + ?Sized>(
    dataset: &Dataset,
    priors: &BalancePriors,
    chain: ChainConfig,
    options: &BalanceOptions,
    rng: &mut R,
) -> Result<Vec<BalanceState>> {
    chain.validate()?;
    priors.validate()?;
    let (n0, n1) = dataset.arm_sizes();
    if n0 == 0 || n1 == 0 {
        return Err(Error::Precondition(format!(
            "balance model needs both eligibility arms, got {n0} ineligible and {n1} eligible"
        )));
    }
    if let Some(s) = options.fixed_sigma2 {
        if !(s > 0.0) {
            return Err(Error::Config("fixed_sigma2 must be positive".into()));
        }
    }

    let mut models = build_models(dataset);
    let mut hyper = options.fixed_hyper.unwrap_or(BalanceHyper {
        mu0: priors.mu0_mean,
        var0: 1.0,
        mu1: priors.mu1_mean,
        var1: 1.0,
        pi: 0.5,
    });
    let mut params: Vec<CovariateDraw> = models
        .iter()
        .map(|m| CovariateDraw {
            name: m.name.clone(),
            gamma0: vec![0.0; m.components.len()],
            gamma1: vec![0.0; m.components.len()],
            spike: vec![true; m.components.len()],
            sigma2: m.continuous.then(|| options.fixed_sigma2.unwrap_or(1.0)),
        })
        .collect();

    let mut out = Vec::with_capacity(chain.retained());
    for sweep in 1..=chain.iters {
        for (model, par) in models.iter_mut().zip(params.iter_mut()) {
            for (c, comp) in model.components.iter_mut().enumerate() {
                update_latent(rng, comp, par.gamma0[c], par.gamma1[c])?;
                let s2 = par.sigma2.unwrap_or(1.0);
                let (g0, g1, spike) = update_coefficients(rng, comp, &hyper, s2)?;
                par.gamma0[c] = g0;
                par.gamma1[c] = g1;
                par.spike[c] = spike;
            }
            if model.continuous && options.fixed_sigma2.is_none() {
                let comp = &model.components[0];
                let ssr: f64 = comp
                    .z
                    .iter()
                    .zip(comp.y())
                    .map(|(&z, &y)| {
                        let r = y - par.gamma0[0] - if z { par.gamma1[0] } else { 0.0 };
                        r * r
                    })
                    .sum();
                let n = comp.z.len() as f64;
                par.sigma2 = Some(sample_inverse_gamma(
                    rng,
                    priors.ig_a + 0.5 * n,
                    priors.ig_b + 0.5 * ssr,
                )?);
            }
        }
        if options.fixed_hyper.is_none() {
            hyper = update_hyper(rng, &params, priors, hyper)?;
        }
        if chain.keeps(sweep) {
            out.push(BalanceState {
                iteration: sweep,
                covariates: params.clone(),
                hyper,
            });
        }
    }
    Ok(out)
}

fn update_latent<R: Rng + ?Sized>(
    rng: &mut R,
    comp: &mut Component,
    g0: f64,
    g1: f64,
) -> Result<()> {
    if let Response::Latent { positive, values } = &mut comp.response {
        for ((v, &pos), &z) in values.iter_mut().zip(positive.iter()).zip(&comp.z) {
            let mean = g0 + if z { g1 } else { 0.0 };
            *v = if pos {
                sample_truncated_normal(rng, mean, 1.0, 0.0, f64::INFINITY)?
            } else {
                sample_truncated_normal(rng, mean, 1.0, f64::NEG_INFINITY, 0.0)?
            };
        }
    }
    Ok(())
}

/// Draws the spike indicator with both coefficients integrated out, then
/// `(γ0, γ1)` from the selected conjugate posterior.
fn update_coefficients<R: Rng + ?Sized>(
    rng: &mut R,
    comp: &Component,
    hyper: &BalanceHyper,
    sigma2: f64,
) -> Result<(f64, f64, bool)> {
    let slab_stats = comp.stats();
    let mut spike_stats = RegressionStats::zeros(1);
    spike_stats.xtx[(0, 0)] = slab_stats.xtx[(0, 0)];
    spike_stats.xty[0] = slab_stats.xty[0];
    spike_stats.yty = slab_stats.yty;
    spike_stats.n = slab_stats.n;

    let spike_mean = DVector::from_element(1, hyper.mu0);
    let spike_var = DVector::from_element(1, hyper.var0);
    let slab_mean = DVector::from_vec(vec![hyper.mu0, hyper.mu1]);
    let slab_var = DVector::from_vec(vec![hyper.var0, hyper.var1]);

    let spike_post = GaussianPosterior::from_stats(&spike_stats, &spike_mean, &spike_var, sigma2)?;
    let slab_post = GaussianPosterior::from_stats(&slab_stats, &slab_mean, &slab_var, sigma2)?;
    let log_spike = spike_post.log_marginal(&spike_stats, &spike_mean, &spike_var, sigma2);
    let log_slab = slab_post.log_marginal(&slab_stats, &slab_mean, &slab_var, sigma2);
    let logit_spike = hyper.pi.ln() - (1.0 - hyper.pi).ln() + log_spike - log_slab;
    let p_spike = logistic(logit_spike);
    if p_spike.is_nan() {
        return Err(Error::Numerical("spike probability is NaN".into()));
    }
    if rng.random::<f64>() < p_spike {
        let g = spike_post.sample(rng);
        Ok((g[0], 0.0, true))
    } else {
        let g = slab_post.sample(rng);
        Ok((g[0], g[1], false))
    }
}

fn update_hyper<R: Rng + ?Sized>(
    rng: &mut R,
    params: &[CovariateDraw],
    priors: &BalancePriors,
    cur: BalanceHyper,
) -> Result<BalanceHyper> {
    let gamma0: Vec<f64> = params
        .iter()
        .flat_map(|p| p.gamma0.iter().copied())
        .collect();
    let slab: Vec<f64> = params
        .iter()
        .flat_map(|p| {
            p.gamma1
                .iter()
                .zip(&p.spike)
                .filter(|(_, &s)| !s)
                .map(|(g, _)| *g)
        })
        .collect();
    let n_spike = params
        .iter()
        .flat_map(|p| p.spike.iter())
        .filter(|&&s| s)
        .count();

    let mu0 = normal_mean_update(rng, &gamma0, cur.var0, priors.mu0_mean, priors.mu0_var);
    let var0 = variance_update(rng, &gamma0, mu0, priors.var0_a, priors.var0_b)?;
    let mu1 = normal_mean_update(rng, &slab, cur.var1, priors.mu1_mean, priors.mu1_var);
    let var1 = variance_update(rng, &slab, mu1, priors.var1_a, priors.var1_b)?;
    let pi = sample_beta(
        rng,
        priors.pi_a + n_spike as f64,
        priors.pi_b + slab.len() as f64,
    )?;
    Ok(BalanceHyper {
        mu0,
        var0,
        mu1,
        var1,
        pi,
    })
}

fn normal_mean_update<R: Rng + ?Sized>(
    rng: &mut R,
    xs: &[f64],
    var: f64,
    prior_mean: f64,
    prior_var: f64,
) -> f64 {
    let precision = 1.0 / prior_var + xs.len() as f64 / var;
    let mean = (prior_mean / prior_var + xs.iter().sum::<f64>() / var) / precision;
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    mean + z / precision.sqrt()
}

fn variance_update<R: Rng + ?Sized>(
    rng: &mut R,
    xs: &[f64],
    mean: f64,
    a: f64,
    b: f64,
) -> Result<f64> {
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    sample_inverse_gamma(rng, a + 0.5 * xs.len() as f64, b + 0.5 * ss)
}

/// Fraction of draws in which every `γ1` component of `covariate` is zero.
pub fn posterior_zero_probability(draws: &[BalanceState], covariate: &str) -> Result<f64> {
    component_zero_probability(draws, covariate, None)
}

/// Zero probability of a single component, or of all components when `None`.
pub fn component_zero_probability(
    draws: &[BalanceState],
    covariate: &str,
    component: Option<usize>,
) -> Result<f64> {
    let first = draws
        .first()
        .ok_or_else(|| Error::Summary("no balance draws".into()))?;
    let j = first
        .covariates
        .iter()
        .position(|c| c.name == covariate)
        .ok_or_else(|| Error::Lookup {
            kind: "covariate",
            name: covariate.to_string(),
        })?;
    let hits = draws
        .iter()
        .filter(|d| {
            let spike = &d.covariates[j].spike;
            match component {
                Some(c) => spike[c],
                None => spike.iter().all(|&s| s),
            }
        })
        .count();
    Ok(hits as f64 / draws.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthStatus {
    Ok,
    InsufficientOverlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub h: f64,
    pub n: usize,
    pub covariate: String,
    /// Level name for categorical components; `None` for the whole covariate.
    pub component: Option<String>,
    pub zero_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSummary {
    pub h: f64,
    pub n: usize,
    pub n_ineligible: usize,
    pub n_eligible: usize,
    pub status: BandwidthStatus,
    /// Smallest whole-covariate zero probability at this bandwidth.
    pub min_zero_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
    pub bandwidths: Vec<BandwidthSummary>,
}

impl BalanceReport {
    /// CSV with columns `h,n,covariate,component,zero_prob`. Each bandwidth ends
    /// with a summary row (`covariate = "*"`) carrying the minimum zero
    /// probability, or `insufficient_overlap` with an empty probability.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["h", "n", "covariate", "component", "zero_prob"])?;
        for b in &self.bandwidths {
            for r in self.rows.iter().filter(|r| r.h == b.h) {
                w.write_record([
                    r.h.to_string(),
                    r.n.to_string(),
                    r.covariate.clone(),
                    r.component.clone().unwrap_or_default(),
                    format!("{:.6}", r.zero_prob),
                ])?;
            }
            let (component, prob) = match (b.status, b.min_zero_prob) {
                (BandwidthStatus::Ok, Some(p)) => ("min".to_string(), format!("{p:.6}")),
                _ => ("insufficient_overlap".to_string(), String::new()),
            };
            w.write_record([
                b.h.to_string(),
                b.n.to_string(),
                "*".into(),
                component,
                prob,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the balance model at every bandwidth of `h_grid`, in parallel, with
/// RNG stream `k` for the `k`-th bandwidth.
pub fn balance_table(
    dataset: &Dataset,
    h_grid: &[f64],
    priors: &BalancePriors,
    chain: ChainConfig,
    seed: u64,
) -> Result<BalanceReport> {
    if h_grid.is_empty() {
        return Err(Error::Config("bandwidth grid is empty".into()));
    }
    for w in h_grid.windows(2) {
        if w[1] == w[0] {
            return Err(Error::Config(format!("duplicate bandwidth {}", w[0])));
        }
        if w[1] < w[0] {
            return Err(Error::Config(
                "bandwidth grid must be sorted ascending".into(),
            ));
        }
    }
    if let Some(h) = h_grid.iter().find(|h| !(**h > 0.0) || !h.is_finite()) {
        return Err(Error::Config(format!(
            "bandwidths must be positive and finite, got {h}"
        )));
    }
    chain.validate()?;
    priors.validate()?;

    let per_h: Vec<Result<(Vec<BalanceRow>, BandwidthSummary)>> = h_grid
        .par_iter()
        .enumerate()
        .map(|(k, &h)| {
            let sub = filter_bandwidth(dataset, h)?;
            let (n0, n1) = sub.arm_sizes();
            let mut summary = BandwidthSummary {
                h,
                n: sub.len(),
                n_ineligible: n0,
                n_eligible: n1,
                status: BandwidthStatus::InsufficientOverlap,
                min_zero_prob: None,
            };
            if n0 == 0 || n1 == 0 {
                return Ok((Vec::new(), summary));
            }
            let mut rng = RngStream::new(seed, k as u64);
            let draws =
                run_balance_chain(&sub, priors, chain, &BalanceOptions::default(), &mut rng)?;
            let mut rows = Vec::new();
            let mut min = f64::INFINITY;
            for spec in sub.spec() {
                let p = posterior_zero_probability(&draws, &spec.name)?;
                min = min.min(p);
                rows.push(BalanceRow {
                    h,
                    n: sub.len(),
                    covariate: spec.name.clone(),
                    component: None,
                    zero_prob: p,
                });
                if spec.kind == CovariateKind::Categorical {
                    for (c, level) in spec.component_names().into_iter().enumerate() {
                        rows.push(BalanceRow {
                            h,
                            n: sub.len(),
                            covariate: spec.name.clone(),
                            component: Some(level),
                            zero_prob: component_zero_probability(&draws, &spec.name, Some(c))?,
                        });
                    }
                }
            }
            summary.status = BandwidthStatus::Ok;
            summary.min_zero_prob = min.is_finite().then_some(min);
            Ok((rows, summary))
        })
        .collect();

    let mut report = BalanceReport {
        rows: Vec::new(),
        bandwidths: Vec::new(),
    };
    for r in per_h {
        let (rows, summary) = r?;
        report.rows.extend(rows);
        report.bandwidths.push(summary);
    }
    Ok(report)
}

/// Bandwidths whose smallest per-covariate zero probability reaches `floor`.
/// Bandwidths flagged for insufficient overlap are never recommended.
pub fn recommend_bandwidths(report: &BalanceReport, floor: f64) -> Vec<f64> {
    report
        .bandwidths
        .iter()
        .filter(|b| b.status == BandwidthStatus::Ok)
        .filter(|b| b.min_zero_prob.map_or(true, |p| p >= floor))
        .map(|b| b.h)
        .collect()
}
