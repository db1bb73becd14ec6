//! Bayesian principal-stratification analysis for fuzzy regression-discontinuity
//! designs.
//!
//! The crate is organised along the analysis pipeline:
//!
//! - [`data`]: the immutable [`data::Dataset`], CSV ingestion, eligibility and
//!   bandwidth windows.
//! - [`kernel`]: seedable random-variate generation and conjugate updates shared
//!   by both samplers.
//! - [`balance`]: hierarchical spike-and-slab covariate-balance model used to
//!   score candidate bandwidths.
//! - [`strata`]: the Gibbs sampler for strata membership and probit outcomes.
//! - [`estimands`]: causal summaries computed from posterior draws.
//! - [`diagnostics`]: Gelman-Rubin, Cramér-von Mises stationarity and posterior
//!   predictive checks.
//! - [`synth`]: generators with known ground truth and a brute-force posterior
//!   for tiny datasets.

pub mod balance;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimands;
pub mod kernel;
pub mod strata;
pub mod synth;

pub use error::{Error, Result};
