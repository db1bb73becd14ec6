//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use rdstrata::balance::{BalancePriors, DEFAULT_FLOOR};
use rdstrata::data::{CovariateSpec, DEFAULT_SCALE};
use rdstrata::kernel::ChainConfig;
use rdstrata::strata::{ModelVariant, OutcomeParams, StrataParams, StrataPriors};
use rdstrata::synth::{CovariateGenerator, ForcingLaw, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    pub bandwidths: Vec<f64>,
    pub data: DataConfig,
    #[serde(default)]
    pub balance: BalanceConfig,
    #[serde(default)]
    pub strata: StrataConfig,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV path, relative to the config file. Defaults to `data.csv` in the
    /// output directory, where `simulate` writes.
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub threshold: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Covariate schema. Taken from `[simulate]` when omitted.
    #[serde(default)]
    pub covariates: Option<Vec<CovariateSpec>>,
}

fn default_scale() -> f64 {
    DEFAULT_SCALE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceConfig {
    pub priors: BalancePriors,
    pub iters: usize,
    pub burn: usize,
    pub thin: usize,
    pub floor: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            priors: BalancePriors::default(),
            iters: 30_000,
            burn: 5_000,
            thin: 5,
            floor: DEFAULT_FLOOR,
        }
    }
}

impl BalanceConfig {
    pub fn chain(&self) -> ChainConfig {
        ChainConfig::new(self.iters, self.burn, self.thin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrataConfig {
    pub priors: StrataPriors,
    pub variant: ModelVariant,
    pub chains: usize,
    pub iters: usize,
    pub burn: usize,
    pub thin: usize,
}

impl Default for StrataConfig {
    fn default() -> Self {
        Self {
            priors: StrataPriors::default(),
            variant: ModelVariant::default(),
            chains: 4,
            iters: 125_000,
            burn: 0,
            thin: 25,
        }
    }
}

impl StrataConfig {
    pub fn chain(&self) -> ChainConfig {
        ChainConfig::new(self.iters, self.burn, self.thin)
    }
}

/// Generator settings. Covariates and true parameters default to the
/// calibrated reference design and must be given together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    /// Half-width of the forcing window; defaults to the largest bandwidth.
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default = "default_forcing_law")]
    pub forcing_law: ForcingLaw,
    #[serde(default)]
    pub covariates: Option<Vec<CovariateGenerator>>,
    #[serde(default)]
    pub true_strata: Option<StrataParams>,
    #[serde(default)]
    pub true_outcome: Option<OutcomeParams>,
}

fn default_forcing_law() -> ForcingLaw {
    ForcingLaw::UniformWindow
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::MissingInput(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: &str| Err(CliError::Config(format!("{field}: {msg}")));
        if self.bandwidths.is_empty() {
            return bad("bandwidths", "must list at least one bandwidth");
        }
        if self.bandwidths.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return bad("bandwidths", "must be positive and finite");
        }
        if self.bandwidths.windows(2).any(|w| w[1] <= w[0]) {
            return bad("bandwidths", "must be strictly increasing");
        }
        if !self.data.threshold.is_finite() {
            return bad("data.threshold", "must be finite");
        }
        if !(self.data.scale > 0.0 && self.data.scale.is_finite()) {
            return bad("data.scale", "must be positive");
        }
        if let Some(spec) = &self.data.covariates {
            for s in spec {
                s.validate()
                    .map_err(|e| CliError::Config(format!("data.covariates: {e}")))?;
            }
        }
        self.balance
            .priors
            .validate()
            .map_err(|e| CliError::Config(format!("balance.priors: {e}")))?;
        self.balance
            .chain()
            .validate()
            .map_err(|e| CliError::Config(format!("balance: {e}")))?;
        if !(0.0..=1.0).contains(&self.balance.floor) {
            return bad("balance.floor", "must lie in [0, 1]");
        }
        self.strata
            .priors
            .validate()
            .map_err(|e| CliError::Config(format!("strata.priors: {e}")))?;
        self.strata
            .chain()
            .validate()
            .map_err(|e| CliError::Config(format!("strata: {e}")))?;
        if self.strata.chains == 0 {
            return bad("strata.chains", "must be at least 1");
        }
        if let Some(sim) = &self.simulate {
            let given = [
                sim.covariates.is_some(),
                sim.true_strata.is_some(),
                sim.true_outcome.is_some(),
            ];
            if given.iter().any(|g| *g) && !given.iter().all(|g| *g) {
                return bad(
                    "simulate",
                    "covariates, true_strata and true_outcome must be given together",
                );
            }
            let synth = self.synth_config().expect("simulate section present");
            synth.validate().map_err(|e| match e {
                rdstrata::Error::Config(m) => CliError::Config(format!("simulate.{m}")),
                other => CliError::Config(other.to_string()),
            })?;
            if let Some(spec) = &self.data.covariates {
                let sim_spec: Vec<CovariateSpec> =
                    synth.covariates.iter().map(|c| c.spec.clone()).collect();
                if *spec != sim_spec {
                    return bad("data.covariates", "disagrees with the simulated covariates");
                }
            }
        }
        Ok(())
    }

    /// Covariate schema of the analyzed data.
    pub fn covariate_spec(&self) -> Vec<CovariateSpec> {
        if let Some(spec) = &self.data.covariates {
            return spec.clone();
        }
        match self.synth_config() {
            Some(s) => s.covariates.iter().map(|c| c.spec.clone()).collect(),
            None => Vec::new(),
        }
    }

    /// Generator configuration, when a `[simulate]` section is present.
    pub fn synth_config(&self) -> Option<SynthConfig> {
        let sim = self.simulate.as_ref()?;
        let mut cfg = SynthConfig::reference(sim.n, self.seed);
        cfg.s0 = self.data.threshold;
        cfg.scale = self.data.scale;
        cfg.h = sim
            .h
            .unwrap_or(*self.bandwidths.last().expect("validated nonempty"));
        cfg.forcing_law = sim.forcing_law.clone();
        if let (Some(c), Some(s), Some(o)) = (&sim.covariates, &sim.true_strata, &sim.true_outcome)
        {
            cfg.covariates = c.clone();
            cfg.true_strata = s.clone();
            cfg.true_outcome = o.clone();
        }
        Some(cfg)
    }

    /// Data file location given the config file directory and output directory.
    pub fn data_path(&self, config_dir: &Path, out: &Path) -> PathBuf {
        match &self.data.path {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => config_dir.join(p),
            None => out.join("data.csv"),
        }
    }
}
