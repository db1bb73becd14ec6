//! Gibbs sampler for the principal-stratification model.
//!
//! Strata membership follows two conditional probits on latent utilities:
//! a unit is an always-applicant when `G*(AA) <= 0`, a never-applicant when
//! `G*(AA) > 0` and `G*(NA) <= 0`, and a compliant-applicant otherwise. The
//! outcome is a probit with one `(intercept, forcing slope)` block per
//! `(stratum, eligibility)` cell and covariate slopes shared by all blocks.
//! Never-applicants have a single block for both arms, and no defiant stratum
//! exists anywhere in the model.
//!
//! Each sweep imputes the strata of units whose observed cell is ambiguous,
//! redraws the latent strata and outcome utilities from truncated normals, and
//! updates every coefficient block by conjugate normal regression.

use std::io::{BufRead, Write};

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{cell_of, CovariateKind, CovariateValue, Dataset, Stratum};
use crate::error::{Error, Result};
use crate::kernel::{
    conjugate_draw_from_stats, ln_std_normal_cdf, sample_categorical_log, sample_truncated_normal,
    std_normal_cdf, ChainConfig, RegressionStats,
};

/// Which regressors enter the strata and outcome models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelVariant {
    pub include_forcing: bool,
    pub include_covariates: bool,
}

impl Default for ModelVariant {
    fn default() -> Self {
        Self {
            include_forcing: true,
            include_covariates: true,
        }
    }
}

impl ModelVariant {
    pub const INTERCEPT_ONLY: ModelVariant = ModelVariant {
        include_forcing: false,
        include_covariates: false,
    };
}

/// How the never-applicant utility of always-applicants enters the
/// `alpha_NA` regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaUtilityMode {
    /// Draw it from its unconstrained normal and regress on all units.
    #[default]
    Augment,
    /// Leave always-applicants out of the `alpha_NA` regression.
    Drop,
}

/// Independent zero-mean normal priors on every coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrataPriors {
    pub alpha_var: f64,
    pub beta_var: f64,
    pub slope_var: f64,
    pub na_utility: NaUtilityMode,
}

impl Default for StrataPriors {
    fn default() -> Self {
        Self {
            alpha_var: 10.0,
            beta_var: 10.0,
            slope_var: 10.0,
            na_utility: NaUtilityMode::Augment,
        }
    }
}

impl StrataPriors {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_var", self.alpha_var),
            ("beta_var", self.beta_var),
            ("slope_var", self.slope_var),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "strata prior {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Numeric model matrix derived from a dataset.
///
/// Covariate slots: continuous values as recorded, binary as 0/1, and one
/// dummy per non-baseline level of each categorical covariate.
#[derive(Debug, Clone)]
pub struct Design {
    variant: ModelVariant,
    slot_names: Vec<String>,
    sstar: Vec<f64>,
    /// Row-major `n × p`.
    x: Vec<f64>,
    z: Vec<bool>,
    a: Vec<bool>,
    y: Vec<bool>,
}

impl Design {
    pub fn new(dataset: &Dataset, variant: ModelVariant) -> Self {
        let mut slot_names = Vec::new();
        for s in dataset.spec() {
            match s.kind {
                CovariateKind::Continuous | CovariateKind::Binary => {
                    slot_names.push(s.name.clone())
                }
                CovariateKind::Categorical => {
                    for level in s.component_names() {
                        slot_names.push(format!("{}={}", s.name, level));
                    }
                }
            }
        }
        let p = slot_names.len();
        let mut x = Vec::with_capacity(dataset.len() * p);
        for u in dataset.units() {
            for (v, s) in u.covariates.iter().zip(dataset.spec()) {
                match (v, s.kind) {
                    (CovariateValue::Real(r), _) => x.push(*r),
                    (CovariateValue::Bit(b), _) => x.push(f64::from(u8::from(*b))),
                    (CovariateValue::Level(k), CovariateKind::Categorical) => {
                        let order = s.ordered_levels();
                        for &level in &order[..order.len() - 1] {
                            x.push(if level == *k { 1.0 } else { 0.0 });
                        }
                    }
                    (CovariateValue::Level(_), _) => unreachable!("validated dataset"),
                }
            }
        }
        Self {
            variant,
            slot_names,
            sstar: (0..dataset.len()).map(|i| dataset.sstar(i)).collect(),
            x,
            z: (0..dataset.len()).map(|i| dataset.z(i)).collect(),
            a: dataset.units().iter().map(|u| u.applied).collect(),
            y: dataset.units().iter().map(|u| u.outcome).collect(),
        }
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Number of covariate slots `p`.
    pub fn slots(&self) -> usize {
        self.slot_names.len()
    }

    pub fn slot_names(&self) -> &[String] {
        &self.slot_names
    }

    pub fn sstar(&self, i: usize) -> f64 {
        self.sstar[i]
    }

    pub fn x(&self, i: usize) -> &[f64] {
        let p = self.slots();
        &self.x[i * p..(i + 1) * p]
    }

    pub fn z(&self, i: usize) -> bool {
        self.z[i]
    }

    pub fn applied(&self, i: usize) -> bool {
        self.a[i]
    }

    pub fn outcome(&self, i: usize) -> bool {
        self.y[i]
    }

    fn strata_row(&self, i: usize, row: &mut Vec<f64>) {
        row.clear();
        row.push(1.0);
        if self.variant.include_forcing {
            row.push(self.sstar[i]);
        }
        if self.variant.include_covariates {
            row.extend_from_slice(self.x(i));
        }
    }

    /// Positions of the active regressors inside a full `2 + p` vector.
    fn active_strata_columns(&self) -> Vec<usize> {
        let mut cols = vec![0];
        if self.variant.include_forcing {
            cols.push(1);
        }
        if self.variant.include_covariates {
            cols.extend(2..2 + self.slots());
        }
        cols
    }
}

/// Coefficients of the two strata probits, each `[intercept, forcing, x...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataParams {
    pub alpha_aa: Vec<f64>,
    pub alpha_na: Vec<f64>,
}

impl StrataParams {
    pub fn zeros(p: usize) -> Self {
        Self {
            alpha_aa: vec![0.0; 2 + p],
            alpha_na: vec![0.0; 2 + p],
        }
    }
}

fn linear(coef: &[f64], sstar: f64, x: &[f64]) -> f64 {
    coef[0] + coef[1] * sstar + coef[2..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
}

/// Strata probabilities of one unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrataProbs {
    pub aa: f64,
    pub na: f64,
    pub ca: f64,
}

impl StrataProbs {
    pub fn get(&self, g: Stratum) -> f64 {
        match g {
            Stratum::AA => self.aa,
            Stratum::CA => self.ca,
            Stratum::NA => self.na,
        }
    }
}

/// `π_AA = Φ(-η_AA)`, `π_NA = (1 - π_AA) Φ(-η_NA)`, `π_CA = 1 - π_AA - π_NA`.
pub fn strata_probabilities(sstar: f64, x: &[f64], params: &StrataParams) -> StrataProbs {
    let eta_aa = linear(&params.alpha_aa, sstar, x);
    let eta_na = linear(&params.alpha_na, sstar, x);
    let rest = std_normal_cdf(eta_aa);
    StrataProbs {
        aa: std_normal_cdf(-eta_aa),
        na: rest * std_normal_cdf(-eta_na),
        ca: rest * std_normal_cdf(eta_na),
    }
}

fn ln_strata_probability(g: Stratum, eta_aa: f64, eta_na: f64) -> f64 {
    match g {
        Stratum::AA => ln_std_normal_cdf(-eta_aa),
        Stratum::NA => ln_std_normal_cdf(eta_aa) + ln_std_normal_cdf(-eta_na),
        Stratum::CA => ln_std_normal_cdf(eta_aa) + ln_std_normal_cdf(eta_na),
    }
}

/// `(intercept, forcing slope)` of one outcome block.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockCoef {
    pub intercept: f64,
    pub forcing: f64,
}

/// The five outcome blocks: AA and CA per arm, NA pooled across arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeBlock {
    AA0,
    AA1,
    CA0,
    CA1,
    NA,
}

impl OutcomeBlock {
    pub const ALL: [OutcomeBlock; 5] = [
        OutcomeBlock::AA0,
        OutcomeBlock::AA1,
        OutcomeBlock::CA0,
        OutcomeBlock::CA1,
        OutcomeBlock::NA,
    ];

    pub fn of(g: Stratum, z: bool) -> Self {
        match (g, z) {
            (Stratum::AA, false) => OutcomeBlock::AA0,
            (Stratum::AA, true) => OutcomeBlock::AA1,
            (Stratum::CA, false) => OutcomeBlock::CA0,
            (Stratum::CA, true) => OutcomeBlock::CA1,
            (Stratum::NA, _) => OutcomeBlock::NA,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeParams {
    pub aa0: BlockCoef,
    pub aa1: BlockCoef,
    pub ca0: BlockCoef,
    pub ca1: BlockCoef,
    pub na: BlockCoef,
    pub shared_slopes: Vec<f64>,
}

impl OutcomeParams {
    pub fn zeros(p: usize) -> Self {
        Self {
            aa0: BlockCoef::default(),
            aa1: BlockCoef::default(),
            ca0: BlockCoef::default(),
            ca1: BlockCoef::default(),
            na: BlockCoef::default(),
            shared_slopes: vec![0.0; p],
        }
    }

    pub fn block(&self, b: OutcomeBlock) -> &BlockCoef {
        match b {
            OutcomeBlock::AA0 => &self.aa0,
            OutcomeBlock::AA1 => &self.aa1,
            OutcomeBlock::CA0 => &self.ca0,
            OutcomeBlock::CA1 => &self.ca1,
            OutcomeBlock::NA => &self.na,
        }
    }

    pub fn block_mut(&mut self, b: OutcomeBlock) -> &mut BlockCoef {
        match b {
            OutcomeBlock::AA0 => &mut self.aa0,
            OutcomeBlock::AA1 => &mut self.aa1,
            OutcomeBlock::CA0 => &mut self.ca0,
            OutcomeBlock::CA1 => &mut self.ca1,
            OutcomeBlock::NA => &mut self.na,
        }
    }

    /// Outcome linear predictor for stratum `g` under eligibility `z`.
    pub fn eta(&self, g: Stratum, z: bool, sstar: f64, x: &[f64]) -> f64 {
        let b = self.block(OutcomeBlock::of(g, z));
        b.intercept
            + b.forcing * sstar
            + self
                .shared_slopes
                .iter()
                .zip(x)
                .map(|(c, v)| c * v)
                .sum::<f64>()
    }
}

/// `Pr(Y(z) = 1 | G = g, S*, X)`; never-applicants ignore `z`.
pub fn outcome_probability(
    g: Stratum,
    z: bool,
    sstar: f64,
    x: &[f64],
    params: &OutcomeParams,
) -> f64 {
    std_normal_cdf(params.eta(g, z, sstar, x))
}

/// One retained sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataDraw {
    pub iteration: usize,
    pub strata: StrataParams,
    pub outcome: OutcomeParams,
    #[serde(with = "strata_codes")]
    pub g_assignment: Vec<Stratum>,
}

mod strata_codes {
    use super::Stratum;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(g: &[Stratum], s: S) -> Result<S::Ok, S::Error> {
        let codes: String = g.iter().map(|g| g.code()).collect();
        s.serialize_str(&codes)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Stratum>, D::Error> {
        let codes = String::deserialize(d)?;
        codes
            .chars()
            .map(|c| {
                Stratum::from_code(c)
                    .ok_or_else(|| serde::de::Error::custom(format!("bad stratum code '{c}'")))
            })
            .collect()
    }
}

/// Full augmented state of the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub g: Vec<Stratum>,
    pub gstar_aa: Vec<f64>,
    pub gstar_na: Vec<f64>,
    pub ystar: Vec<f64>,
    pub strata: StrataParams,
    pub outcome: OutcomeParams,
}

impl AugmentedState {
    /// Checks that the latent utilities agree with strata and outcomes.
    pub fn check(&self, design: &Design) -> Result<()> {
        for i in 0..design.len() {
            let g = self.g[i];
            if !cell_of(design.z(i), design.applied(i)).admits(g) {
                return Err(Error::Numerical(format!(
                    "unit {i}: stratum {g} incompatible with cell"
                )));
            }
            let ok_g = match g {
                Stratum::AA => self.gstar_aa[i] <= 0.0,
                Stratum::NA => self.gstar_aa[i] > 0.0 && self.gstar_na[i] <= 0.0,
                Stratum::CA => self.gstar_aa[i] > 0.0 && self.gstar_na[i] > 0.0,
            };
            let ok_y = (self.ystar[i] > 0.0) == design.outcome(i);
            if !ok_g || !ok_y {
                return Err(Error::Numerical(format!(
                    "unit {i}: latent utilities inconsistent"
                )));
            }
        }
        Ok(())
    }
}

/// Draws the stratum of unit `i` from `π_ig f_igz(Y_i)` over its compatible set.
pub fn sample_missing_strata<R: Rng + ?Sized>(
    rng: &mut R,
    design: &Design,
    i: usize,
    strata: &StrataParams,
    outcome: &OutcomeParams,
) -> Result<Stratum> {
    let cell = cell_of(design.z(i), design.applied(i));
    if !cell.is_ambiguous() {
        return Ok(cell.compatible[0]);
    }
    let (s, x) = (design.sstar(i), design.x(i));
    let eta_aa = linear(&strata.alpha_aa, s, x);
    let eta_na = linear(&strata.alpha_na, s, x);
    let mut logw = [0.0; 2];
    for (w, &g) in logw.iter_mut().zip(cell.compatible) {
        let eta_y = outcome.eta(g, cell.z, s, x);
        let ln_f = if design.outcome(i) {
            ln_std_normal_cdf(eta_y)
        } else {
            ln_std_normal_cdf(-eta_y)
        };
        *w = ln_strata_probability(g, eta_aa, eta_na) + ln_f;
    }
    let k = sample_categorical_log(rng, &logw)?;
    Ok(cell.compatible[k])
}

/// Stateful Gibbs sampler over one dataset.
pub struct StrataSampler<'a> {
    design: &'a Design,
    priors: StrataPriors,
    state: AugmentedState,
    strata_cols: Vec<usize>,
    sweeps: usize,
}

impl<'a> StrataSampler<'a> {
    /// Initial state: ambiguous strata uniform over the compatible set, all
    /// coefficients 0, latent utilities consistent with strata and outcomes.
    pub fn new<R: Rng + ?Sized>(
        design: &'a Design,
        priors: StrataPriors,
        rng: &mut R,
    ) -> Result<Self> {
        priors.validate()?;
        let n = design.len();
        let p = design.slots();
        let g: Vec<Stratum> = (0..n)
            .map(|i| {
                let cell = cell_of(design.z(i), design.applied(i));
                cell.compatible[rng.random_range(0..cell.compatible.len())]
            })
            .collect();
        let state = AugmentedState {
            g,
            gstar_aa: vec![0.0; n],
            gstar_na: vec![0.0; n],
            ystar: vec![0.0; n],
            strata: StrataParams::zeros(p),
            outcome: OutcomeParams::zeros(p),
        };
        let mut sampler = Self {
            design,
            priors,
            state,
            strata_cols: design.active_strata_columns(),
            sweeps: 0,
        };
        sampler.draw_strata_utilities(rng)?;
        sampler.draw_outcome_utilities(rng)?;
        Ok(sampler)
    }

    pub fn state(&self) -> &AugmentedState {
        &self.state
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    pub fn draw(&self) -> StrataDraw {
        StrataDraw {
            iteration: self.sweeps,
            strata: self.state.strata.clone(),
            outcome: self.state.outcome.clone(),
            g_assignment: self.state.g.clone(),
        }
    }

    /// One full sweep: strata, strata utilities, strata coefficients, outcome
    /// utilities, outcome coefficients.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let d = self.design;
        for i in 0..d.len() {
            self.state.g[i] =
                sample_missing_strata(rng, d, i, &self.state.strata, &self.state.outcome)?;
        }
        self.draw_strata_utilities(rng)?;
        self.update_alpha(rng)?;
        self.draw_outcome_utilities(rng)?;
        self.update_beta(rng)?;
        self.sweeps += 1;
        Ok(())
    }

    fn draw_strata_utilities<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let d = self.design;
        let st = &mut self.state;
        for i in 0..d.len() {
            let (s, x) = (d.sstar(i), d.x(i));
            let eta_aa = linear(&st.strata.alpha_aa, s, x);
            let eta_na = linear(&st.strata.alpha_na, s, x);
            let (inf, ninf) = (f64::INFINITY, f64::NEG_INFINITY);
            match st.g[i] {
                Stratum::AA => {
                    st.gstar_aa[i] = sample_truncated_normal(rng, eta_aa, 1.0, ninf, 0.0)?;
                    st.gstar_na[i] = sample_truncated_normal(rng, eta_na, 1.0, ninf, inf)?;
                }
                Stratum::NA => {
                    st.gstar_aa[i] = sample_truncated_normal(rng, eta_aa, 1.0, 0.0, inf)?;
                    st.gstar_na[i] = sample_truncated_normal(rng, eta_na, 1.0, ninf, 0.0)?;
                }
                Stratum::CA => {
                    st.gstar_aa[i] = sample_truncated_normal(rng, eta_aa, 1.0, 0.0, inf)?;
                    st.gstar_na[i] = sample_truncated_normal(rng, eta_na, 1.0, 0.0, inf)?;
                }
            }
        }
        Ok(())
    }

    fn update_alpha<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let d = self.design;
        let k = self.strata_cols.len();
        let mut aa = RegressionStats::zeros(k);
        let mut na = RegressionStats::zeros(k);
        let mut row = Vec::with_capacity(k);
        for i in 0..d.len() {
            d.strata_row(i, &mut row);
            aa.push(&row, self.state.gstar_aa[i]);
            if self.state.g[i] != Stratum::AA || self.priors.na_utility == NaUtilityMode::Augment {
                na.push(&row, self.state.gstar_na[i]);
            }
        }
        aa.symmetrize();
        na.symmetrize();
        let m0 = DVector::zeros(k);
        let v0 = DVector::from_element(k, self.priors.alpha_var);
        let a_aa = conjugate_draw_from_stats(rng, &aa, &m0, &v0, 1.0)?;
        let a_na = conjugate_draw_from_stats(rng, &na, &m0, &v0, 1.0)?;
        for (j, &col) in self.strata_cols.iter().enumerate() {
            self.state.strata.alpha_aa[col] = a_aa[j];
            self.state.strata.alpha_na[col] = a_na[j];
        }
        Ok(())
    }

    fn draw_outcome_utilities<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let d = self.design;
        let st = &mut self.state;
        for i in 0..d.len() {
            let mu = st.outcome.eta(st.g[i], d.z(i), d.sstar(i), d.x(i));
            st.ystar[i] = if d.outcome(i) {
                sample_truncated_normal(rng, mu, 1.0, 0.0, f64::INFINITY)?
            } else {
                sample_truncated_normal(rng, mu, 1.0, f64::NEG_INFINITY, 0.0)?
            };
        }
        Ok(())
    }

    fn update_beta<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let d = self.design;
        let forcing = d.variant().include_forcing;
        let k = if forcing { 2 } else { 1 };
        let p = d.slots();
        let covariates = d.variant().include_covariates && p > 0;

        // Block coefficients given the shared slopes.
        let mut stats: Vec<RegressionStats> = (0..5).map(|_| RegressionStats::zeros(k)).collect();
        for i in 0..d.len() {
            let st = &self.state;
            let b = OutcomeBlock::of(st.g[i], d.z(i));
            let xb: f64 = st
                .outcome
                .shared_slopes
                .iter()
                .zip(d.x(i))
                .map(|(c, v)| c * v)
                .sum();
            let r = st.ystar[i] - xb;
            if forcing {
                stats[b.index()].push(&[1.0, d.sstar(i)], r);
            } else {
                stats[b.index()].push(&[1.0], r);
            }
        }
        let m0 = DVector::zeros(k);
        let v0 = DVector::from_element(k, self.priors.beta_var);
        for (b, st) in OutcomeBlock::ALL.iter().zip(stats.iter_mut()) {
            st.symmetrize();
            // An empty block leaves only the prior terms, so this is a prior draw.
            let coef = conjugate_draw_from_stats(rng, st, &m0, &v0, 1.0)?;
            let block = self.state.outcome.block_mut(*b);
            block.intercept = coef[0];
            block.forcing = if forcing { coef[1] } else { 0.0 };
        }

        if covariates {
            let mut sl = RegressionStats::zeros(p);
            for i in 0..d.len() {
                let st = &self.state;
                let b = st.outcome.block(OutcomeBlock::of(st.g[i], d.z(i)));
                let r = st.ystar[i] - b.intercept - b.forcing * d.sstar(i);
                sl.push(d.x(i), r);
            }
            sl.symmetrize();
            let coef = conjugate_draw_from_stats(
                rng,
                &sl,
                &DVector::zeros(p),
                &DVector::from_element(p, self.priors.slope_var),
                1.0,
            )?;
            self.state.outcome.shared_slopes = coef.iter().copied().collect();
        }
        Ok(())
    }
}

/// Runs one chain and returns the retained draws.
pub fn run_chain<R: Rng + ?Sized>(
    rng: &mut R,
    design: &Design,
    priors: StrataPriors,
    chain: ChainConfig,
) -> Result<Vec<StrataDraw>> {
    chain.validate()?;
    if design.is_empty() {
        return Err(Error::Precondition(
            "strata model needs a nonempty dataset".into(),
        ));
    }
    let n1 = (0..design.len()).filter(|&i| design.z(i)).count();
    if n1 == 0 || n1 == design.len() {
        return Err(Error::Precondition(
            "strata model needs both eligibility arms".into(),
        ));
    }
    let mut sampler = StrataSampler::new(design, priors, rng)?;
    let mut out = Vec::with_capacity(chain.retained());
    for t in 1..=chain.iters {
        sampler.sweep(rng)?;
        if chain.keeps(t) {
            out.push(sampler.draw());
        }
    }
    Ok(out)
}

/// First line of a draws file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsHeader {
    pub variant: ModelVariant,
    pub priors: StrataPriors,
    pub chain: ChainConfig,
    pub seed: u64,
    pub stream: u64,
    pub bandwidth: Option<f64>,
    pub dataset_digest: String,
    pub n_units: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum DrawsRecord {
    Header(DrawsHeader),
    Draw(StrataDraw),
}

/// Writes a header line followed by one JSON object per draw.
pub fn write_draws_jsonl<W: Write>(
    mut w: W,
    header: &DrawsHeader,
    draws: &[StrataDraw],
) -> Result<()> {
    let to_io = |e: serde_json::Error| Error::Io(std::io::Error::other(e));
    serde_json::to_writer(&mut w, &DrawsRecord::Header(header.clone())).map_err(to_io)?;
    w.write_all(b"\n")?;
    for d in draws {
        serde_json::to_writer(&mut w, &DrawsRecord::Draw(d.clone())).map_err(to_io)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_draws_jsonl<R: BufRead>(r: R) -> Result<(DrawsHeader, Vec<StrataDraw>)> {
    let mut header = None;
    let mut draws = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DrawsRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Ingest(format!("draws line {}: {e}", k + 1)))?;
        match rec {
            DrawsRecord::Header(h) if header.is_none() && draws.is_empty() => header = Some(h),
            DrawsRecord::Header(_) => {
                return Err(Error::Ingest(format!(
                    "unexpected header at line {}",
                    k + 1
                )))
            }
            DrawsRecord::Draw(d) => draws.push(d),
        }
    }
    let header = header.ok_or_else(|| Error::Ingest("draws file has no header".into()))?;
    if let Some(d) = draws
        .iter()
        .find(|d| d.g_assignment.len() != header.n_units)
    {
        return Err(Error::Ingest(format!(
            "draw {} has {} strata labels, header says {} units",
            d.iteration,
            d.g_assignment.len(),
            header.n_units
        )));
    }
    Ok((header, draws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnitRecord;
    use crate::kernel::RngStream;

    fn tiny_dataset(cells: &[(bool, bool, bool)]) -> Dataset {
        let units = cells
            .iter()
            .enumerate()
            .map(|(i, &(z, a, y))| UnitRecord {
                id: i.to_string(),
                forcing: if z {
                    14_800.0 - i as f64
                } else {
                    15_200.0 + i as f64
                },
                applied: a,
                received: z && a,
                outcome: y,
                covariates: vec![],
            })
            .collect();
        Dataset::new(vec![], units, 15_000.0, 1000.0).unwrap()
    }

    #[test]
    fn zero_coefficients_give_quarter_split() {
        let p = StrataParams::zeros(2);
        let pr = strata_probabilities(0.3, &[1.0, -2.0], &p);
        assert_eq!((pr.aa, pr.na, pr.ca), (0.5, 0.25, 0.25));
    }

    #[test]
    fn saturated_probits() {
        let mut p = StrataParams::zeros(0);
        p.alpha_aa[0] = -8.0;
        let pr = strata_probabilities(0.0, &[], &p);
        assert!(pr.aa > 1.0 - 1e-14 && pr.na < 1e-14 && pr.ca < 1e-14);
        p.alpha_aa[0] = 8.0;
        p.alpha_na[0] = -8.0;
        let pr = strata_probabilities(0.0, &[], &p);
        assert!(pr.aa < 1e-14 && pr.na > 1.0 - 1e-14 && pr.ca < 1e-14);
    }

    #[test]
    fn outcome_probability_wiring() {
        let mut o = OutcomeParams::zeros(1);
        for g in Stratum::ALL {
            for z in [false, true] {
                assert_eq!(outcome_probability(g, z, 0.4, &[1.0], &o), 0.5);
            }
        }
        o.aa1.intercept = -0.358;
        let p = outcome_probability(Stratum::AA, true, 0.0, &[0.0], &o);
        assert!((p - 0.360).abs() < 5e-4, "{p}");
        o.na = BlockCoef {
            intercept: 0.7,
            forcing: -1.3,
        };
        o.shared_slopes = vec![0.2];
        assert_eq!(
            outcome_probability(Stratum::NA, false, 0.9, &[1.5], &o),
            outcome_probability(Stratum::NA, true, 0.9, &[1.5], &o)
        );
    }

    #[test]
    fn forced_cells_are_never_resampled() {
        let d = tiny_dataset(&[(false, true, true), (true, false, false)]);
        let design = Design::new(&d, ModelVariant::INTERCEPT_ONLY);
        let mut rng = RngStream::new(1, 0);
        let s = StrataParams::zeros(0);
        let o = OutcomeParams::zeros(0);
        for _ in 0..100 {
            assert_eq!(
                sample_missing_strata(&mut rng, &design, 0, &s, &o).unwrap(),
                Stratum::AA
            );
            assert_eq!(
                sample_missing_strata(&mut rng, &design, 1, &s, &o).unwrap(),
                Stratum::NA
            );
        }
    }

    #[test]
    fn symmetric_mixture_is_even() {
        // Zero coefficients: π_AA = 0.5, π_CA = 0.25, so give CA a matching
        // likelihood edge through α_AA to make π_AA = π_CA.
        let d = tiny_dataset(&[(true, true, false)]);
        let design = Design::new(&d, ModelVariant::INTERCEPT_ONLY);
        let mut s = StrataParams::zeros(0);
        // π_AA = Φ(-a), π_CA = Φ(a)Φ(b); choose b large so π_CA ≈ Φ(a), a = 0.
        s.alpha_na[0] = 40.0;
        let o = OutcomeParams::zeros(0);
        let mut rng = RngStream::new(2, 0);
        let n = 100_000;
        let aa = (0..n)
            .filter(|_| sample_missing_strata(&mut rng, &design, 0, &s, &o).unwrap() == Stratum::AA)
            .count() as f64
            / n as f64;
        assert!((aa - 0.5).abs() < 0.005, "{aa}");
    }

    #[test]
    fn three_to_one_weights() {
        // Cell (0,0): weights π_CA f_CA0 vs π_NA f_NA. With zero α, π_CA = π_NA;
        // pick outcome intercepts so f_CA0 = 3 f_NA at Y = 1.
        let d = tiny_dataset(&[(false, false, true)]);
        let design = Design::new(&d, ModelVariant::INTERCEPT_ONLY);
        let s = StrataParams::zeros(0);
        let mut o = OutcomeParams::zeros(0);
        o.ca0.intercept = crate::kernel::std_normal_quantile(0.75);
        o.na.intercept = crate::kernel::std_normal_quantile(0.25);
        let mut rng = RngStream::new(3, 0);
        let n = 100_000;
        let ca = (0..n)
            .filter(|_| sample_missing_strata(&mut rng, &design, 0, &s, &o).unwrap() == Stratum::CA)
            .count() as f64
            / n as f64;
        assert!((ca - 0.75).abs() < 0.005, "{ca}");
    }

    #[test]
    fn replayed_stream_gives_identical_states() {
        let d = tiny_dataset(&[
            (true, true, true),
            (true, false, false),
            (false, false, true),
            (false, true, false),
            (true, true, false),
        ]);
        let design = Design::new(&d, ModelVariant::default());
        let run = || {
            let mut rng = RngStream::new(11, 2);
            let mut s = StrataSampler::new(&design, StrataPriors::default(), &mut rng).unwrap();
            s.sweep(&mut rng).unwrap();
            s.sweep(&mut rng).unwrap();
            s.state().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sweeps_preserve_invariants() {
        let cells: Vec<(bool, bool, bool)> = (0..40)
            .map(|i| (i % 2 == 0, i % 3 == 0, i % 5 < 2))
            .collect();
        let d = tiny_dataset(&cells);
        for mode in [NaUtilityMode::Augment, NaUtilityMode::Drop] {
            let design = Design::new(&d, ModelVariant::default());
            let mut rng = RngStream::new(4, 0);
            let priors = StrataPriors {
                na_utility: mode,
                ..Default::default()
            };
            let mut s = StrataSampler::new(&design, priors, &mut rng).unwrap();
            s.state().check(&design).unwrap();
            for _ in 0..50 {
                s.sweep(&mut rng).unwrap();
                s.state().check(&design).unwrap();
            }
        }
    }

    #[test]
    fn forced_never_applicants_stay_never_applicants() {
        let d = tiny_dataset(&[(true, false, false); 30]);
        let design = Design::new(&d, ModelVariant::INTERCEPT_ONLY);
        let mut rng = RngStream::new(5, 0);
        let mut s = StrataSampler::new(&design, StrataPriors::default(), &mut rng).unwrap();
        let mut aa_block = Vec::new();
        for _ in 0..3000 {
            s.sweep(&mut rng).unwrap();
            assert!(s.state().g.iter().all(|&g| g == Stratum::NA));
            aa_block.push(s.state().outcome.aa1.intercept);
        }
        // The AA outcome blocks never see data and stay at the N(0, 10) prior.
        let m = aa_block.iter().sum::<f64>() / aa_block.len() as f64;
        let v = aa_block.iter().map(|b| (b - m).powi(2)).sum::<f64>() / aa_block.len() as f64;
        assert!(m.abs() < 0.25 && (v - 10.0).abs() < 1.5, "{m} {v}");
    }

    #[test]
    fn run_chain_counts_and_preconditions() {
        let d = tiny_dataset(&[
            (true, true, true),
            (false, false, false),
            (false, true, true),
        ]);
        let design = Design::new(&d, ModelVariant::INTERCEPT_ONLY);
        let mut rng = RngStream::new(6, 0);
        let draws = run_chain(
            &mut rng,
            &design,
            StrataPriors::default(),
            ChainConfig::new(100, 50, 5),
        )
        .unwrap();
        assert_eq!(draws.len(), 10);
        assert_eq!(draws[0].iteration, 55);
        // Intercept-only variant keeps forcing and covariate slots at 0.
        assert!(draws
            .iter()
            .all(|d| d.strata.alpha_aa[1] == 0.0 && d.outcome.aa0.forcing == 0.0));

        let single = Design::new(
            &tiny_dataset(&[(true, true, true)]),
            ModelVariant::default(),
        );
        assert!(matches!(
            run_chain(
                &mut rng,
                &single,
                StrataPriors::default(),
                ChainConfig::new(10, 0, 1)
            ),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            run_chain(
                &mut rng,
                &design,
                StrataPriors::default(),
                ChainConfig::new(10, 10, 1)
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn draws_jsonl_roundtrip() {
        let d = tiny_dataset(&[
            (true, true, true),
            (false, false, false),
            (false, true, true),
        ]);
        let design = Design::new(&d, ModelVariant::default());
        let mut rng = RngStream::new(7, 0);
        let draws = run_chain(
            &mut rng,
            &design,
            StrataPriors::default(),
            ChainConfig::new(20, 0, 10),
        )
        .unwrap();
        let header = DrawsHeader {
            variant: ModelVariant::default(),
            priors: StrataPriors::default(),
            chain: ChainConfig::new(20, 0, 10),
            seed: 7,
            stream: 0,
            bandwidth: Some(1000.0),
            dataset_digest: "abc".into(),
            n_units: 3,
            config_digest: None,
        };
        let mut buf = Vec::new();
        write_draws_jsonl(&mut buf, &header, &draws).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text
            .lines()
            .next()
            .unwrap()
            .contains("\"record\":\"header\""));
        let (h, back) = read_draws_jsonl(buf.as_slice()).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, draws);
        assert!(read_draws_jsonl("".as_bytes()).is_err());
    }
}
