//! Causal summaries from posterior draws.
//!
//! Population-average quantities average model-based probabilities over the
//! units of the analyzed dataset, either at their own forcing values or with
//! `S* = 0` for everyone. Sample-average quantities use each draw's strata
//! assignment, the observed outcome in the realized arm and an imputed
//! outcome in the other arm.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Stratum};
use crate::error::{Error, Result};
use crate::kernel::{std_normal_cdf, RngStream};
use crate::strata::{
    strata_probabilities, Design, OutcomeParams, StrataDraw, StrataParams, StrataProbs,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimandKind {
    PopWithin,
    PopAtS0,
    SampleAvg,
}

impl EstimandKind {
    /// Column order of the rendered table.
    pub const ALL: [EstimandKind; 3] = [
        EstimandKind::PopWithin,
        EstimandKind::SampleAvg,
        EstimandKind::PopAtS0,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimandKind::PopWithin => "pop_within",
            EstimandKind::PopAtS0 => "pop_at_s0",
            EstimandKind::SampleAvg => "sample_avg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    #[serde(rename = "pi_AA")]
    PiAA,
    #[serde(rename = "pi_CA")]
    PiCA,
    #[serde(rename = "pi_NA")]
    PiNA,
    #[serde(rename = "tau_AA")]
    TauAA,
    #[serde(rename = "tau_CA")]
    TauCA,
    #[serde(rename = "tau_union")]
    TauUnion,
}

impl Target {
    pub const ALL: [Target; 6] = [
        Target::PiAA,
        Target::PiCA,
        Target::PiNA,
        Target::TauAA,
        Target::TauCA,
        Target::TauUnion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::PiAA => "pi_AA",
            Target::PiCA => "pi_CA",
            Target::PiNA => "pi_NA",
            Target::TauAA => "tau_AA",
            Target::TauCA => "tau_CA",
            Target::TauUnion => "tau_union",
        }
    }
}

/// Strata whose effect is summarized: AA, CA, or their union.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectGroup {
    AA,
    CA,
    Union,
}

impl EffectGroup {
    pub fn contains(self, g: Stratum) -> bool {
        match self {
            EffectGroup::AA => g == Stratum::AA,
            EffectGroup::CA => g == Stratum::CA,
            EffectGroup::Union => g != Stratum::NA,
        }
    }
}

/// Population quantities of one parameter draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationEffects {
    /// Average strata probabilities over units.
    pub pi: StrataProbs,
    pub tau_aa: f64,
    pub tau_ca: f64,
    pub tau_union: f64,
}

/// All population quantities in one pass over the units.
pub fn population_effects(
    strata: &StrataParams,
    outcome: &OutcomeParams,
    design: &Design,
    at_s0: bool,
) -> Result<PopulationEffects> {
    if design.is_empty() {
        return Err(Error::Estimation(
            "population averages need at least one unit".into(),
        ));
    }
    let (mut w_aa, mut w_ca, mut w_na) = (0.0, 0.0, 0.0);
    let (mut aa1, mut aa0, mut ca1, mut ca0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..design.len() {
        let s = if at_s0 { 0.0 } else { design.sstar(i) };
        let x = design.x(i);
        let p = strata_probabilities(s, x, strata);
        w_aa += p.aa;
        w_ca += p.ca;
        w_na += p.na;
        aa1 += p.aa * std_normal_cdf(outcome.eta(Stratum::AA, true, s, x));
        aa0 += p.aa * std_normal_cdf(outcome.eta(Stratum::AA, false, s, x));
        ca1 += p.ca * std_normal_cdf(outcome.eta(Stratum::CA, true, s, x));
        ca0 += p.ca * std_normal_cdf(outcome.eta(Stratum::CA, false, s, x));
    }
    if !(w_aa > 0.0 && w_ca > 0.0) {
        return Err(Error::Numerical(
            "a strata weight underflowed to zero".into(),
        ));
    }
    let tau_aa = aa1 / w_aa - aa0 / w_aa;
    let tau_ca = ca1 / w_ca - ca0 / w_ca;
    let n = design.len() as f64;
    Ok(PopulationEffects {
        pi: StrataProbs {
            aa: w_aa / n,
            na: w_na / n,
            ca: w_ca / n,
        },
        tau_aa,
        tau_ca,
        tau_union: (tau_aa * w_aa + tau_ca * w_ca) / (w_aa + w_ca),
    })
}

/// Population-average effect of eligibility for always- or compliant-applicants.
pub fn pop_average_effect(
    strata: &StrataParams,
    outcome: &OutcomeParams,
    design: &Design,
    g: Stratum,
    at_s0: bool,
) -> Result<f64> {
    let e = population_effects(strata, outcome, design, at_s0)?;
    match g {
        Stratum::AA => Ok(e.tau_aa),
        Stratum::CA => Ok(e.tau_ca),
        Stratum::NA => Err(Error::Precondition(
            "never-applicants have no effect estimand".into(),
        )),
    }
}

/// Effect on the union of always- and compliant-applicants.
pub fn union_effect(
    strata: &StrataParams,
    outcome: &OutcomeParams,
    design: &Design,
    at_s0: bool,
) -> Result<f64> {
    Ok(population_effects(strata, outcome, design, at_s0)?.tau_union)
}

/// Finite-sample effect for the units assigned to `group` in this draw.
///
/// The missing potential outcome is drawn independently from the outcome
/// model given the unit's stratum. Returns `None` when no unit is in the group.
pub fn sample_average_effect<R: Rng + ?Sized>(
    rng: &mut R,
    draw: &StrataDraw,
    design: &Design,
    group: EffectGroup,
) -> Option<f64> {
    let mut count = 0usize;
    let mut total = 0i64;
    for i in 0..design.len() {
        let g = draw.g_assignment[i];
        if !group.contains(g) {
            continue;
        }
        let z = design.z(i);
        let p_mis = std_normal_cdf(draw.outcome.eta(g, !z, design.sstar(i), design.x(i)));
        let y_mis = rng.random::<f64>() < p_mis;
        let (y1, y0) = if z {
            (design.outcome(i), y_mis)
        } else {
            (y_mis, design.outcome(i))
        };
        total += i64::from(y1) - i64::from(y0);
        count += 1;
    }
    (count > 0).then(|| total as f64 / count as f64)
}

/// Strata shares `N_g / n` under a draw's assignment.
pub fn sample_strata_shares(draw: &StrataDraw) -> StrataProbs {
    let n = draw.g_assignment.len().max(1) as f64;
    let count = |s| draw.g_assignment.iter().filter(|&&g| g == s).count() as f64 / n;
    StrataProbs {
        aa: count(Stratum::AA),
        na: count(Stratum::NA),
        ca: count(Stratum::CA),
    }
}

/// Linear interpolation between order statistics at position `p (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Posterior median and equal-tailed 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_draws: usize,
}

pub fn summarize(series: &[f64]) -> Result<Summary> {
    if series.is_empty() {
        return Err(Error::Summary("cannot summarize an empty series".into()));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Summary("series contains non-finite values".into()));
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        median: quantile_sorted(&sorted, 0.5),
        ci_low: quantile_sorted(&sorted, 0.025),
        ci_high: quantile_sorted(&sorted, 0.975),
        n_draws: sorted.len(),
    })
}

/// One cell of the estimand table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandResult {
    pub kind: EstimandKind,
    pub target: Target,
    /// `None` when every draw was missing.
    pub summary: Option<Summary>,
    /// Draws with no unit in the target stratum.
    pub n_missing: usize,
    #[serde(skip)]
    pub series: Vec<Option<f64>>,
}

impl EstimandResult {
    fn from_series(kind: EstimandKind, target: Target, series: Vec<Option<f64>>) -> Result<Self> {
        let present: Vec<f64> = series.iter().flatten().copied().collect();
        let summary = if present.is_empty() {
            None
        } else {
            Some(summarize(&present)?)
        };
        Ok(Self {
            kind,
            target,
            summary,
            n_missing: series.len() - present.len(),
            series,
        })
    }
}

/// Six targets under each of the three kinds for one set of draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandTable {
    pub bandwidth: Option<f64>,
    pub results: Vec<EstimandResult>,
}

impl EstimandTable {
    pub fn get(&self, kind: EstimandKind, target: Target) -> &EstimandResult {
        self.results
            .iter()
            .find(|r| r.kind == kind && r.target == target)
            .expect("table holds every kind and target")
    }
}

#[derive(Debug, Clone, Copy)]
struct DrawValues {
    within: PopulationEffects,
    at_s0: PopulationEffects,
    sample_pi: StrataProbs,
    sample_tau: [Option<f64>; 3],
}

/// Computes the full table. Draw `k` imputes its missing outcomes with
/// stream `k` of `seed`, so results do not depend on thread scheduling.
pub fn estimate_all(
    draws: &[StrataDraw],
    design: &Design,
    bandwidth: Option<f64>,
    seed: u64,
) -> Result<EstimandTable> {
    if draws.is_empty() {
        return Err(Error::Summary("no draws to summarize".into()));
    }
    if let Some(d) = draws.iter().find(|d| d.g_assignment.len() != design.len()) {
        return Err(Error::Precondition(format!(
            "draw {} covers {} units but the dataset has {}",
            d.iteration,
            d.g_assignment.len(),
            design.len()
        )));
    }
    let values: Vec<DrawValues> = draws
        .par_iter()
        .enumerate()
        .map(|(k, d)| {
            let mut rng = RngStream::new(seed, k as u64);
            Ok(DrawValues {
                within: population_effects(&d.strata, &d.outcome, design, false)?,
                at_s0: population_effects(&d.strata, &d.outcome, design, true)?,
                sample_pi: sample_strata_shares(d),
                sample_tau: [EffectGroup::AA, EffectGroup::CA, EffectGroup::Union]
                    .map(|g| sample_average_effect(&mut rng, d, design, g)),
            })
        })
        .collect::<Result<_>>()?;

    let pick_pop = |e: &PopulationEffects, t: Target| match t {
        Target::PiAA => e.pi.aa,
        Target::PiCA => e.pi.ca,
        Target::PiNA => e.pi.na,
        Target::TauAA => e.tau_aa,
        Target::TauCA => e.tau_ca,
        Target::TauUnion => e.tau_union,
    };
    let mut results = Vec::with_capacity(18);
    for kind in EstimandKind::ALL {
        for target in Target::ALL {
            let series: Vec<Option<f64>> = values
                .iter()
                .map(|v| match kind {
                    EstimandKind::PopWithin => Some(pick_pop(&v.within, target)),
                    EstimandKind::PopAtS0 => Some(pick_pop(&v.at_s0, target)),
                    EstimandKind::SampleAvg => match target {
                        Target::PiAA => Some(v.sample_pi.aa),
                        Target::PiCA => Some(v.sample_pi.ca),
                        Target::PiNA => Some(v.sample_pi.na),
                        Target::TauAA => v.sample_tau[0],
                        Target::TauCA => v.sample_tau[1],
                        Target::TauUnion => v.sample_tau[2],
                    },
                })
                .collect();
            results.push(EstimandResult::from_series(kind, target, series)?);
        }
    }
    Ok(EstimandTable { bandwidth, results })
}

/// Writes tables with one row per (bandwidth, target) and a
/// median / lower / upper triple per kind.
pub fn write_tables_csv<W: Write>(tables: &[EstimandTable], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["h".to_string(), "target".to_string()];
    for kind in EstimandKind::ALL {
        for col in ["median", "ci_low", "ci_high", "n_missing"] {
            header.push(format!("{}_{col}", kind.name()));
        }
    }
    w.write_record(&header)?;
    for t in tables {
        for target in Target::ALL {
            let mut row = vec![
                t.bandwidth.map(|h| h.to_string()).unwrap_or_default(),
                target.name().to_string(),
            ];
            for kind in EstimandKind::ALL {
                let r = t.get(kind, target);
                match r.summary {
                    Some(s) => row.extend([s.median, s.ci_low, s.ci_high].map(|v| v.to_string())),
                    None => row.extend([String::new(), String::new(), String::new()]),
                }
                row.push(r.n_missing.to_string());
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Ratio of the intention-to-treat contrast in outcomes to the first-stage
/// contrast in receipt.
pub fn wald_iv_estimate(dataset: &Dataset) -> Result<f64> {
    let (mut n, mut y, mut w) = ([0.0f64; 2], [0.0f64; 2], [0.0f64; 2]);
    for (i, u) in dataset.units().iter().enumerate() {
        let k = usize::from(dataset.z(i));
        n[k] += 1.0;
        y[k] += f64::from(u8::from(u.outcome));
        w[k] += f64::from(u8::from(u.received));
    }
    if n[0] == 0.0 || n[1] == 0.0 {
        return Err(Error::Precondition(
            "Wald estimate needs both eligibility arms".into(),
        ));
    }
    let first_stage = w[1] / n[1] - w[0] / n[0];
    if first_stage == 0.0 {
        return Err(Error::Estimation("first stage is zero".into()));
    }
    Ok((y[1] / n[1] - y[0] / n[0]) / first_stage)
}
