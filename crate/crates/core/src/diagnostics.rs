//! Convergence diagnostics and posterior predictive checks.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimands::{population_effects, EffectGroup};
use crate::kernel::{std_normal_cdf, RngStream};
use crate::strata::{Design, OutcomeBlock, StrataDraw};

/// Minimum series length for the stationarity test.
pub const CVM_MIN_LEN: usize = 100;

/// Per-chain series of one monitored quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSet {
    pub name: String,
    pub chains: Vec<Vec<f64>>,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64], m: f64) -> f64 {
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Potential scale reduction `sqrt((W (n-1)/n + B/n) / W)`, where `W` is the
/// mean within-chain variance and `B/n` the variance of the chain means.
///
/// The value is floored at 1, so chains with identical means report exactly 1.
/// Returns `+inf` when constant chains disagree.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::Precondition(
            "R-hat needs at least two chains".into(),
        ));
    }
    let n = chains[0].len();
    if n < 2 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::Precondition(
            "R-hat needs equal chain lengths of at least 2".into(),
        ));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let b_over_n = means.iter().map(|v| (v - grand).powi(2)).sum::<f64>() / (m - 1) as f64;
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| sample_var(c, mu))
        .sum::<f64>()
        / m as f64;
    if w == 0.0 {
        return Ok(if b_over_n == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let nf = n as f64;
    Ok(((w * (nf - 1.0) / nf + b_over_n) / w).sqrt().max(1.0))
}

/// R-hat on chains cut into first and second halves (middle draw dropped
/// for odd lengths).
pub fn gelman_rubin_split(chains: &[Vec<f64>]) -> Result<f64> {
    let mut halves = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        halves.push(c[..h].to_vec());
        halves.push(c[c.len() - h..].to_vec());
    }
    gelman_rubin(&halves)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvmResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// `exp(-q) K_{1/4}(q)` from `K_ν(q) = ∫_0^∞ exp(-q cosh t) cosh(ν t) dt`.
fn scaled_bessel_k_quarter(q: f64) -> f64 {
    // Integrand falls below e^-46 of its peak beyond t_max.
    let t_max = (1.0 + 46.0 / q).acosh();
    let n = 2000;
    let h = t_max / n as f64;
    let f = |t: f64| (-q * (t.cosh() + 1.0)).exp() * (0.25 * t).cosh();
    let mut s = f(0.0) + f(t_max);
    for k in 1..n {
        s += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Limiting distribution function of the Cramér–von Mises statistic.
pub fn cvm_limit_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for k in 0..200 {
        let kf = k as f64;
        let u = (libm::lgamma(kf + 0.5) - libm::lgamma(kf + 1.0)).exp() / (PI.powf(1.5) * x.sqrt());
        let y = 4.0 * kf + 1.0;
        let q = y * y / (16.0 * x);
        let term = u * y.sqrt() * scaled_bessel_k_quarter(q);
        total += term;
        if term.abs() < 1e-10 {
            break;
        }
    }
    total.clamp(0.0, 1.0)
}

/// Two-sample Cramér–von Mises test between the first and second halves of a
/// series, with the asymptotic p-value after moment standardization.
pub fn cvm_stationarity(series: &[f64]) -> Result<CvmResult> {
    if series.len() < CVM_MIN_LEN {
        return Err(Error::Precondition(format!(
            "stationarity test needs at least {CVM_MIN_LEN} values, got {}",
            series.len()
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition(
            "series contains non-finite values".into(),
        ));
    }
    let h = series.len() / 2;
    let (x, y) = (&series[..h], &series[series.len() - h..]);
    if series.iter().all(|&v| v == series[0]) {
        return Ok(CvmResult {
            statistic: 0.0,
            p_value: 1.0,
        });
    }
    let (nx, ny) = (x.len(), y.len());
    let big_n = nx + ny;

    // Mid-ranks in the pooled sample.
    let mut pooled: Vec<(f64, bool)> = x
        .iter()
        .map(|&v| (v, true))
        .chain(y.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; big_n];
    let mut i = 0;
    while i < big_n {
        let mut j = i;
        while j + 1 < big_n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        ranks[i..=j].iter_mut().for_each(|v| *v = r);
        i = j + 1;
    }
    let (mut rx, mut ry) = (Vec::with_capacity(nx), Vec::with_capacity(ny));
    for (k, &(_, from_x)) in pooled.iter().enumerate() {
        if from_x {
            rx.push(ranks[k]);
        } else {
            ry.push(ranks[k]);
        }
    }
    let ss = |r: &[f64]| {
        r.iter()
            .enumerate()
            .map(|(i, v)| (v - (i + 1) as f64).powi(2))
            .sum::<f64>()
    };
    let (nxf, nyf, nf) = (nx as f64, ny as f64, big_n as f64);
    let u = nxf * ss(&rx) + nyf * ss(&ry);
    let k = nxf * nyf;
    let t = u / (k * nf) - (4.0 * k - 1.0) / (6.0 * nf);

    let et = (1.0 + 1.0 / nf) / 6.0;
    let vt = (nf + 1.0) * (4.0 * k * nf - 3.0 * (nxf * nxf + nyf * nyf) - 2.0 * k)
        / (45.0 * nf * nf * 4.0 * k);
    let tn = 1.0 / 6.0 + (t - et) / (45.0 * vt).sqrt();
    Ok(CvmResult {
        statistic: t,
        p_value: (1.0 - cvm_limit_cdf(tn)).clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Signal,
    Noise,
    Snr,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Signal, Measure::Noise, Measure::Snr];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Signal => "signal",
            Measure::Noise => "noise",
            Measure::Snr => "snr",
        }
    }
}

fn group_name(g: EffectGroup) -> &'static str {
    match g {
        EffectGroup::AA => "AA",
        EffectGroup::CA => "CA",
        EffectGroup::Union => "union",
    }
}

/// Signal, noise and SNR of binary outcomes within one group.
///
/// `None` when an arm is empty or the group has fewer than three units.
pub fn discrepancies(y: &[bool], z: &[bool], member: &[bool]) -> Option<[f64; 3]> {
    let (mut n, mut s) = ([0.0f64; 2], [0.0f64; 2]);
    for ((&y, &z), &m) in y.iter().zip(z).zip(member) {
        if m {
            n[usize::from(z)] += 1.0;
            s[usize::from(z)] += f64::from(u8::from(y));
        }
    }
    if n[0] == 0.0 || n[1] == 0.0 || n[0] + n[1] < 3.0 {
        return None;
    }
    let signal = (s[1] / n[1] - s[0] / n[0]).abs();
    let within = (s[0] - s[0] * s[0] / n[0]) + (s[1] - s[1] * s[1] / n[1]);
    let noise = (within.max(0.0) / (n[0] + n[1] - 2.0)).sqrt();
    let snr = if noise > 0.0 { signal / noise } else { 0.0 };
    Some([signal, noise, snr])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcRow {
    pub group: String,
    pub measure: Measure,
    /// `None` when every draw was skipped.
    pub pppv: Option<f64>,
    pub n_used: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcReport {
    pub rows: Vec<PpcRow>,
}

impl PpcReport {
    pub fn get(&self, group: &str, measure: Measure) -> Option<&PpcRow> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.measure == measure)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["group", "measure", "pppv", "n_used", "n_skipped"])?;
        for r in &self.rows {
            w.write_record([
                r.group.clone(),
                r.measure.name().to_string(),
                r.pppv.map(|p| p.to_string()).unwrap_or_default(),
                r.n_used.to_string(),
                r.n_skipped.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

const PPC_GROUPS: [EffectGroup; 3] = [EffectGroup::CA, EffectGroup::AA, EffectGroup::Union];

/// Posterior predictive p-values of signal, noise and SNR for the CA, AA and
/// union groups.
///
/// Each draw replicates the outcome vector from its own parameters and strata
/// assignment (stream `k` of `seed` for draw `k`); realized discrepancies use
/// the same assignment. A p-value is the fraction of draws whose replicated
/// discrepancy is at least the realized one.
pub fn ppc_discrepancies(draws: &[StrataDraw], design: &Design, seed: u64) -> Result<PpcReport> {
    if draws.is_empty() {
        return Err(Error::Precondition(
            "posterior predictive check needs draws".into(),
        ));
    }
    if draws.iter().any(|d| d.g_assignment.len() != design.len()) {
        return Err(Error::Precondition("draws do not match the dataset".into()));
    }
    let n = design.len();
    let z: Vec<bool> = (0..n).map(|i| design.z(i)).collect();
    let y: Vec<bool> = (0..n).map(|i| design.outcome(i)).collect();

    // Per draw and group: exceedance flags for the three measures.
    let per_draw: Vec<[Option<[bool; 3]>; 3]> = draws
        .par_iter()
        .enumerate()
        .map(|(k, d)| {
            let mut rng = RngStream::new(seed, k as u64);
            let y_rep: Vec<bool> = (0..n)
                .map(|i| {
                    let p = std_normal_cdf(d.outcome.eta(
                        d.g_assignment[i],
                        z[i],
                        design.sstar(i),
                        design.x(i),
                    ));
                    rng.random::<f64>() < p
                })
                .collect();
            PPC_GROUPS.map(|g| {
                let member: Vec<bool> = d.g_assignment.iter().map(|&s| g.contains(s)).collect();
                let real = discrepancies(&y, &z, &member)?;
                let rep = discrepancies(&y_rep, &z, &member)?;
                Some([0, 1, 2].map(|m| rep[m] >= real[m]))
            })
        })
        .collect();

    let mut rows = Vec::with_capacity(9);
    for (gi, g) in PPC_GROUPS.iter().enumerate() {
        for (mi, measure) in Measure::ALL.iter().enumerate() {
            let flags: Vec<bool> = per_draw
                .iter()
                .filter_map(|d| d[gi].map(|f| f[mi]))
                .collect();
            let n_used = flags.len();
            rows.push(PpcRow {
                group: group_name(*g).to_string(),
                measure: *measure,
                pppv: (n_used > 0)
                    .then(|| flags.iter().filter(|&&f| f).count() as f64 / n_used as f64),
                n_used,
                n_skipped: draws.len() - n_used,
            });
        }
    }
    Ok(PpcReport { rows })
}

/// Scalar series monitored for convergence: coefficients and population
/// quantities at observed forcing values.
pub fn monitored_series(draws: &[StrataDraw], design: &Design) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    let mut add = |name: String, f: &dyn Fn(&StrataDraw) -> f64| {
        out.push((name, draws.iter().map(f).collect()));
    };
    let v = design.variant();
    let mut columns = vec![(0, "intercept".to_string())];
    if v.include_forcing {
        columns.push((1, "forcing".to_string()));
    }
    if v.include_covariates {
        columns.extend(
            design
                .slot_names()
                .iter()
                .cloned()
                .enumerate()
                .map(|(j, l)| (j + 2, l)),
        );
    }
    for (j, l) in &columns {
        add(format!("alpha_AA[{l}]"), &|d| d.strata.alpha_aa[*j]);
        add(format!("alpha_NA[{l}]"), &|d| d.strata.alpha_na[*j]);
    }
    for b in OutcomeBlock::ALL {
        add(format!("beta_{b:?}[intercept]"), &|d| {
            d.outcome.block(b).intercept
        });
        if v.include_forcing {
            add(format!("beta_{b:?}[forcing]"), &|d| {
                d.outcome.block(b).forcing
            });
        }
    }
    if v.include_covariates {
        for (j, l) in design.slot_names().iter().enumerate() {
            add(format!("beta_X[{l}]"), &|d| d.outcome.shared_slopes[j]);
        }
    }
    let effects = draws
        .par_iter()
        .map(|d| population_effects(&d.strata, &d.outcome, design, false))
        .collect::<Result<Vec<_>>>()?;
    let mut add = |name: &str, f: fn(&crate::estimands::PopulationEffects) -> f64| {
        out.push((name.to_string(), effects.iter().map(f).collect()));
    };
    add("pi_AA", |e| e.pi.aa);
    add("pi_CA", |e| e.pi.ca);
    add("pi_NA", |e| e.pi.na);
    add("tau_AA", |e| e.tau_aa);
    add("tau_CA", |e| e.tau_ca);
    add("tau_union", |e| e.tau_union);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhatEntry {
    pub quantity: String,
    /// `None` when the value is infinite.
    pub rhat: Option<f64>,
    pub split_rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvmEntry {
    pub quantity: String,
    pub chain: usize,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub rhat: Vec<RhatEntry>,
    pub cvm: Vec<CvmEntry>,
    pub ppc: PpcReport,
    pub warnings: Vec<String>,
}

/// R-hat across chains, per-chain stationarity tests and the predictive check
/// on the pooled draws.
pub fn diagnose(
    chains: &[Vec<StrataDraw>],
    design: &Design,
    seed: u64,
) -> Result<DiagnosticsReport> {
    if chains.is_empty() || chains.iter().any(|c| c.is_empty()) {
        return Err(Error::Precondition(
            "diagnostics need nonempty chains".into(),
        ));
    }
    let mut warnings = Vec::new();
    let series: Vec<Vec<(String, Vec<f64>)>> = chains
        .iter()
        .map(|c| monitored_series(c, design))
        .collect::<Result<_>>()?;

    let mut rhat = Vec::new();
    let equal_len = chains.iter().all(|c| c.len() == chains[0].len());
    if chains.len() < 2 {
        warnings.push("single chain: R-hat skipped".to_string());
    } else if !equal_len {
        warnings.push("chains differ in length: R-hat skipped".to_string());
    } else {
        for (q, (name, _)) in series[0].iter().enumerate() {
            let set: Vec<Vec<f64>> = series.iter().map(|s| s[q].1.clone()).collect();
            let finite = |v: f64| v.is_finite().then_some(v);
            rhat.push(RhatEntry {
                quantity: name.clone(),
                rhat: finite(gelman_rubin(&set)?),
                split_rhat: gelman_rubin_split(&set).ok().and_then(finite),
            });
        }
    }

    let mut cvm = Vec::new();
    for (c, s) in series.iter().enumerate() {
        for (name, values) in s {
            match cvm_stationarity(values) {
                Ok(r) => cvm.push(CvmEntry {
                    quantity: name.clone(),
                    chain: c,
                    statistic: r.statistic,
                    p_value: r.p_value,
                }),
                Err(Error::Precondition(msg)) => {
                    warnings.push(format!("chain {c}, {name}: {msg}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }

    let pooled: Vec<StrataDraw> = chains.iter().flatten().cloned().collect();
    let ppc = ppc_discrepancies(&pooled, design, seed)?;
    Ok(DiagnosticsReport {
        rhat,
        cvm,
        ppc,
        warnings,
    })
}

/// Compatible-strata check over a whole chain.
pub fn assignments_compatible(draws: &[StrataDraw], design: &Design) -> bool {
    draws.iter().all(|d| {
        d.g_assignment
            .iter()
            .enumerate()
            .all(|(i, &g)| crate::data::cell_of(design.z(i), design.applied(i)).admits(g))
    })
}
