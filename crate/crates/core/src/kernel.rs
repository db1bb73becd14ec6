//! Random-variate generation and conjugate updates shared by the balance and
//! strata samplers.
//!
//! Every sampler takes an explicit RNG. [`RngStream`] wraps a ChaCha8 generator
//! keyed by `(seed, stream id)`; distinct stream ids select disjoint keystreams
//! of the same seed, so parallel chains never share state. Outputs are
//! bit-reproducible on platforms with IEEE-754 binary64; `exp`/`ln` come from the
//! platform math library and are the one possible source of last-bit drift
//! between platforms.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use libm::erfc;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

/// Seeded, independently addressable random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Length and retention schedule of an MCMC run.
///
/// Sweeps are numbered `1..=iters`; sweep `t` is kept when `t > burn` and
/// `(t - burn)` is a multiple of `thin`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub iters: usize,
    pub burn: usize,
    pub thin: usize,
}

impl ChainConfig {
    pub fn new(iters: usize, burn: usize, thin: usize) -> Self {
        Self { iters, burn, thin }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Config("thin must be positive".into()));
        }
        if self.iters <= self.burn {
            return Err(Error::Config(format!(
                "iters ({}) must exceed burn ({})",
                self.iters, self.burn
            )));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.iters - self.burn) / self.thin
    }

    pub fn keeps(&self, sweep: usize) -> bool {
        sweep > self.burn && (sweep - self.burn) % self.thin == 0
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal quantile.
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    // One Halley step against the accurate CDF.
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    if pdf <= 0.0 || !x.is_finite() {
        return x;
    }
    let e = std_normal_cdf(x) - p;
    let u = e / pdf;
    x - u / (1.0 + 0.5 * x * u)
}

/// `ln Φ(x)`, accurate deep into the lower tail.
pub fn ln_std_normal_cdf(x: f64) -> f64 {
    if x > -30.0 {
        return std_normal_cdf(x).ln();
    }
    // Asymptotic Mills-ratio expansion.
    let x2 = x * x;
    let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
    -0.5 * x2 - 0.5 * (2.0 * PI).ln() - (-x).ln() + series.ln()
}

/// `ln(1 - Φ(x)) = ln Φ(-x)`.
pub fn ln_std_normal_sf(x: f64) -> f64 {
    ln_std_normal_cdf(-x)
}

const TAIL_CUTOFF: f64 = 6.0;
const MAX_RETRIES: usize = 64;

/// Draws from `N(mu, sigma²)` restricted to the open interval `(lower, upper)`.
///
/// Moderate truncation uses the inverse CDF evaluated on the side of the
/// interval where the CDF has full relative precision. Truncation points beyond
/// six standard deviations switch to exponential-proposal rejection (or uniform
/// rejection for very narrow intervals), so far-tail draws terminate quickly.
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    rng: &mut R,
    mu: f64,
    sigma: f64,
    lower: f64,
    upper: f64,
) -> Result<f64> {
    if !mu.is_finite() || !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!(
            "truncated normal needs finite mu and positive sigma, got ({mu}, {sigma})"
        )));
    }
    if lower.is_nan() || upper.is_nan() || lower >= upper {
        return Err(Error::Domain(format!(
            "truncation interval ({lower}, {upper}) is empty"
        )));
    }
    let a = (lower - mu) / sigma;
    let b = (upper - mu) / sigma;
    for _ in 0..MAX_RETRIES {
        let x = mu + sigma * standard_truncated(rng, a, b);
        if x > lower && x < upper {
            return Ok(x);
        }
    }
    // Interval narrower than the floating-point resolution around mu.
    let mid = if lower.is_finite() && upper.is_finite() {
        0.5 * lower + 0.5 * upper
    } else if lower.is_finite() {
        next_up(lower)
    } else {
        next_down(upper)
    };
    if mid > lower && mid < upper {
        Ok(mid)
    } else {
        Err(Error::Domain(format!(
            "truncation interval ({lower}, {upper}) has no interior representable point"
        )))
    }
}

fn next_up(x: f64) -> f64 {
    if x >= 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        f64::from_bits(x.to_bits() - 1)
    }
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

fn standard_truncated<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return rng.sample(StandardNormal);
    }
    if a >= TAIL_CUTOFF {
        return upper_tail(rng, a, b);
    }
    if b <= -TAIL_CUTOFF {
        return -upper_tail(rng, -b, -a);
    }
    if a > 0.0 {
        return -inverse_cdf(rng, -b, -a);
    }
    inverse_cdf(rng, a, b)
}

/// Inverse-CDF draw on `(a, b)` with `a <= 0`.
fn inverse_cdf<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    let pa = std_normal_cdf(a);
    let pb = std_normal_cdf(b);
    let u: f64 = rng.random();
    std_normal_quantile(pa + u * (pb - pa))
}

/// Draw on `(a, b)` with `a >= TAIL_CUTOFF`.
fn upper_tail<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    if b - a < 1.0 / rate {
        // Narrow window: uniform proposal, acceptance >= exp(-1).
        loop {
            let z = a + (b - a) * rng.random::<f64>();
            let u: f64 = rng.random();
            if z > a && z < b && u <= (0.5 * (a * a - z * z)).exp() {
                return z;
            }
        }
    }
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let z = a + exp.sample(rng);
        if z <= a || z >= b {
            continue;
        }
        let u: f64 = rng.random();
        let d = z - rate;
        if u <= (-0.5 * d * d).exp() {
            return z;
        }
    }
}

/// Inverse-gamma draw with shape `a` and rate `b`: mean `b / (a - 1)`.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()) {
        return Err(Error::Domain(format!(
            "inverse gamma needs positive shape and rate, got ({shape}, {rate})"
        )));
    }
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Domain(e.to_string()))?;
    loop {
        let x = g.sample(rng);
        if x > 0.0 {
            let v = 1.0 / x;
            if v.is_finite() {
                return Ok(v);
            }
        }
    }
}

/// Beta draw strictly inside `(0, 1)`.
pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::Domain(format!(
            "beta needs positive parameters, got ({a}, {b})"
        )));
    }
    let d = Beta::new(a, b).map_err(|e| Error::Domain(e.to_string()))?;
    loop {
        let x = d.sample(rng);
        if x > 0.0 && x < 1.0 {
            return Ok(x);
        }
    }
}

/// Index drawn with probability proportional to `weights`.
pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> Result<usize> {
    let mut total = 0.0;
    for &w in weights {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Domain(format!("invalid categorical weight {w}")));
        }
        total += w;
    }
    if !(total > 0.0) {
        return Err(Error::Domain("categorical weights are all zero".into()));
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if target < acc {
                return Ok(i);
            }
        }
    }
    Ok(last_positive)
}

/// Categorical draw from unnormalized log-weights.
pub fn sample_categorical_log<R: Rng + ?Sized>(rng: &mut R, log_weights: &[f64]) -> Result<usize> {
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical(
            "log-weights have no finite maximum".into(),
        ));
    }
    let w: Vec<f64> = log_weights.iter().map(|&l| (l - max).exp()).collect();
    sample_categorical(rng, &w)
}

/// Gaussian linear regression with a diagonal normal prior on the coefficients.
#[derive(Debug, Clone)]
pub struct GaussianRegressionUpdate {
    /// `n × p`, rows are units.
    pub design: DMatrix<f64>,
    pub response: DVector<f64>,
    pub prior_mean: DVector<f64>,
    /// Diagonal of the prior covariance.
    pub prior_var: DVector<f64>,
    pub residual_var: f64,
}

impl GaussianRegressionUpdate {
    pub fn validate(&self) -> Result<()> {
        let p = self.prior_mean.len();
        if self.design.ncols() != p || self.prior_var.len() != p {
            return Err(Error::Domain("regression dimensions do not conform".into()));
        }
        if self.design.nrows() != self.response.len() {
            return Err(Error::Domain(
                "design rows and response length differ".into(),
            ));
        }
        if self.prior_var.iter().any(|&v| !(v > 0.0)) || !(self.residual_var > 0.0) {
            return Err(Error::Domain(
                "prior and residual variances must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn stats(&self) -> RegressionStats {
        let xt = self.design.transpose();
        RegressionStats {
            xtx: &xt * &self.design,
            xty: &xt * &self.response,
            yty: self.response.dot(&self.response),
            n: self.response.len(),
        }
    }
}

/// Sufficient statistics `X'X`, `X'y`, `y'y` of a Gaussian regression.
#[derive(Debug, Clone)]
pub struct RegressionStats {
    pub xtx: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
    pub n: usize,
}

impl RegressionStats {
    pub fn zeros(p: usize) -> Self {
        Self {
            xtx: DMatrix::zeros(p, p),
            xty: DVector::zeros(p),
            yty: 0.0,
            n: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.xty.len()
    }

    /// Accumulates one observation row.
    pub fn push(&mut self, x: &[f64], y: f64) {
        let p = self.dim();
        debug_assert_eq!(x.len(), p);
        for r in 0..p {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            self.xty[r] += xr * y;
            for c in r..p {
                self.xtx[(r, c)] += xr * x[c];
            }
        }
        self.yty += y * y;
        self.n += 1;
    }

    /// Mirrors the upper triangle filled by [`push`](Self::push).
    pub fn symmetrize(&mut self) {
        let p = self.dim();
        for r in 0..p {
            for c in 0..r {
                self.xtx[(r, c)] = self.xtx[(c, r)];
            }
        }
    }
}

/// Posterior of a conjugate Gaussian regression in precision form.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    /// Lower Cholesky factor of the posterior precision.
    pub precision_chol: DMatrix<f64>,
}

impl GaussianPosterior {
    pub fn from_stats(
        stats: &RegressionStats,
        prior_mean: &DVector<f64>,
        prior_var: &DVector<f64>,
        residual_var: f64,
    ) -> Result<Self> {
        let p = stats.dim();
        let mut precision = &stats.xtx / residual_var;
        let mut rhs = &stats.xty / residual_var;
        for j in 0..p {
            precision[(j, j)] += 1.0 / prior_var[j];
            rhs[j] += prior_mean[j] / prior_var[j];
        }
        let chol = precision.cholesky().ok_or_else(|| {
            Error::Numerical("posterior precision is not positive definite".into())
        })?;
        let mean = chol.solve(&rhs);
        Ok(Self {
            mean,
            precision_chol: chol.l(),
        })
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let l = &self.precision_chol;
        let linv = l
            .clone()
            .solve_lower_triangular(&DMatrix::identity(l.nrows(), l.nrows()))
            .expect("triangular factor with positive diagonal");
        linv.transpose() * linv
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let p = self.mean.len();
        let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        // x = mean + L^{-T} z has covariance (L L^T)^{-1}.
        let offset = self
            .precision_chol
            .tr_solve_lower_triangular(&z)
            .expect("triangular factor with positive diagonal");
        &self.mean + offset
    }

    /// `ln p(y)` with the coefficients integrated out.
    pub fn log_marginal(
        &self,
        stats: &RegressionStats,
        prior_mean: &DVector<f64>,
        prior_var: &DVector<f64>,
        residual_var: f64,
    ) -> f64 {
        let n = stats.n as f64;
        let log_det_prior: f64 = prior_var.iter().map(|v| v.ln()).sum();
        let log_det_precision: f64 = 2.0
            * self
                .precision_chol
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let prior_quad: f64 = prior_mean
            .iter()
            .zip(prior_var.iter())
            .map(|(m, v)| m * m / v)
            .sum();
        // m_n' P m_n = |L' m_n|².
        let lt_mean = self.precision_chol.transpose() * &self.mean;
        let post_quad = lt_mean.norm_squared();
        -0.5 * n * (2.0 * PI * residual_var).ln()
            - 0.5 * log_det_prior
            - 0.5 * log_det_precision
            - 0.5 * (stats.yty / residual_var + prior_quad - post_quad)
    }
}

/// One draw from `N(V (X'y/σ² + V0⁻¹ m0), V)` with `V = (X'X/σ² + V0⁻¹)⁻¹`.
pub fn conjugate_regression_draw<R: Rng + ?Sized>(
    rng: &mut R,
    update: &GaussianRegressionUpdate,
) -> Result<DVector<f64>> {
    update.validate()?;
    let post = GaussianPosterior::from_stats(
        &update.stats(),
        &update.prior_mean,
        &update.prior_var,
        update.residual_var,
    )?;
    Ok(post.sample(rng))
}

/// Draw from sufficient statistics instead of a materialized design.
pub fn conjugate_draw_from_stats<R: Rng + ?Sized>(
    rng: &mut R,
    stats: &RegressionStats,
    prior_mean: &DVector<f64>,
    prior_var: &DVector<f64>,
    residual_var: f64,
) -> Result<DVector<f64>> {
    Ok(GaussianPosterior::from_stats(stats, prior_mean, prior_var, residual_var)?.sample(rng))
}

/// Inputs of a single-coefficient spike-and-slab update.
#[derive(Debug, Clone)]
pub struct SpikeSlabInput<'a> {
    /// Response with every other term of the linear predictor removed.
    pub residual: &'a [f64],
    pub regressor: &'a [f64],
    pub residual_var: f64,
    pub slab_mean: f64,
    pub slab_var: f64,
    /// Prior probability of the point mass at zero.
    pub spike_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeSlabDraw {
    /// True when the coefficient sits in the point mass (and equals 0).
    pub in_spike: bool,
    pub coefficient: f64,
    /// Posterior probability of the point mass that the indicator was drawn from.
    pub spike_posterior: f64,
}

/// Logistic function evaluated without overflow.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Posterior probability of the point mass with the slab coefficient
/// integrated out.
pub fn spike_posterior_probability(input: &SpikeSlabInput<'_>) -> Result<f64> {
    validate_spike_slab(input)?;
    let (log_bf_slab, _, _) = slab_terms(input);
    let logit_slab = (1.0 - input.spike_prob).ln() - input.spike_prob.ln() + log_bf_slab;
    let p = logistic(-logit_slab);
    if p.is_nan() {
        return Err(Error::Numerical("spike posterior is NaN".into()));
    }
    Ok(p)
}

/// Draws the spike indicator from its marginal posterior, then the coefficient
/// from its conjugate slab posterior when the slab is selected.
pub fn spike_slab_draw<R: Rng + ?Sized>(
    rng: &mut R,
    input: &SpikeSlabInput<'_>,
) -> Result<SpikeSlabDraw> {
    let spike_posterior = spike_posterior_probability(input)?;
    let (_, precision, rhs) = slab_terms(input);
    if rng.random::<f64>() < spike_posterior {
        return Ok(SpikeSlabDraw {
            in_spike: true,
            coefficient: 0.0,
            spike_posterior,
        });
    }
    let mean = rhs / precision;
    let z: f64 = rng.sample(StandardNormal);
    Ok(SpikeSlabDraw {
        in_spike: false,
        coefficient: mean + z / precision.sqrt(),
        spike_posterior,
    })
}

fn validate_spike_slab(input: &SpikeSlabInput<'_>) -> Result<()> {
    if input.residual.len() != input.regressor.len() {
        return Err(Error::Domain(
            "residual and regressor lengths differ".into(),
        ));
    }
    if !(input.slab_var > 0.0) || !(input.residual_var > 0.0) {
        return Err(Error::Domain(
            "spike-slab variances must be positive".into(),
        ));
    }
    if !(input.spike_prob > 0.0 && input.spike_prob < 1.0) {
        return Err(Error::Domain(format!(
            "spike probability must lie in (0, 1), got {}",
            input.spike_prob
        )));
    }
    Ok(())
}

/// (log Bayes factor slab:spike, slab posterior precision, slab posterior rhs).
fn slab_terms(input: &SpikeSlabInput<'_>) -> (f64, f64, f64) {
    let (mut xx, mut xr) = (0.0, 0.0);
    for (x, r) in input.regressor.iter().zip(input.residual) {
        xx += x * x;
        xr += x * r;
    }
    let s2 = input.residual_var;
    let (m, v) = (input.slab_mean, input.slab_var);
    let precision = xx / s2 + 1.0 / v;
    let rhs = xr / s2 + m / v;
    let log_bf = -0.5 * (v * precision).ln() - 0.5 * (m * m / v - rhs * rhs / precision);
    (log_bf, precision, rhs)
}

/// Gauss-Hermite nodes and weights for `∫ f(x) exp(-x²) dx`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Nodes and weights for `E[f(X)]`, `X ~ N(mean, var)`, built on Gauss-Hermite.
pub fn normal_quadrature(n: usize, mean: f64, var: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_hermite(n);
    let s = (2.0 * var).sqrt();
    let norm = PI.sqrt();
    (
        x.iter().map(|xi| mean + s * xi).collect(),
        w.iter().map(|wi| wi / norm).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn chain_retention_arithmetic() {
        assert_eq!(ChainConfig::new(125_000, 0, 25).retained(), 5000);
        let c = ChainConfig::new(100, 50, 5);
        assert_eq!(c.retained(), 10);
        assert_eq!((1..=100).filter(|&t| c.keeps(t)).count(), 10);
        assert!(ChainConfig::new(10, 10, 1).validate().is_err());
        assert!(ChainConfig::new(10, 0, 0).validate().is_err());
    }

    #[test]
    fn normal_cdf_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        assert!(std_normal_cdf(-8.0) <= 1e-15);
        // High-precision reference values.
        assert!((std_normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((std_normal_cdf(-2.5) - 0.006_209_665_325_776_132).abs() < 1e-12);
        assert!((std_normal_cdf(-8.0) - 6.220_960_574_271_785e-16).abs() < 1e-12);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-12, 1e-6, 0.01, 0.3, 0.5, 0.9, 0.999] {
            let x = std_normal_quantile(p);
            assert!(
                (std_normal_cdf(x) - p).abs() < 1e-12 * p.max(1e-3) * 1e3,
                "{p}"
            );
        }
    }

    #[test]
    fn log_cdf_is_continuous_across_branches() {
        let a = ln_std_normal_cdf(-29.999_999);
        let b = ln_std_normal_cdf(-30.000_001);
        assert!((a - b).abs() < 1e-3);
        assert!(ln_std_normal_cdf(-100.0).is_finite());
        assert!((ln_std_normal_cdf(0.0) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut r = RngStream::new(7, 3);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::new(7, 3);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut r = RngStream::new(7, 4);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn half_normal_mean() {
        let mut rng = RngStream::new(1, 0);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| sample_truncated_normal(&mut rng, 0.0, 1.0, 0.0, f64::INFINITY).unwrap())
            .collect();
        assert!(xs.iter().all(|&x| x > 0.0));
        let (m, se) = mean_and_se(&xs);
        let exact = (2.0 / PI).sqrt();
        assert!((m - exact).abs() < 0.008, "{m}");
        assert!((m - exact).abs() < 3.0 * se);
    }

    #[test]
    fn untruncated_moments() {
        let mut rng = RngStream::new(2, 0);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                sample_truncated_normal(&mut rng, 5.0, 2.0, f64::NEG_INFINITY, f64::INFINITY)
                    .unwrap()
            })
            .collect();
        let (m, se) = mean_and_se(&xs);
        assert!((m - 5.0).abs() < 3.0 * se);
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0);
        assert!((var - 4.0).abs() < 0.06, "{var}");
    }

    #[test]
    fn far_tail_draws_stay_in_window() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..10_000 {
            let x = sample_truncated_normal(&mut rng, 0.0, 1.0, 10.0, 11.0).unwrap();
            assert!(x > 10.0 && x < 11.0);
            let y = sample_truncated_normal(&mut rng, 0.0, 1.0, -40.0, -39.999).unwrap();
            assert!(y > -40.0 && y < -39.999);
            let w = sample_truncated_normal(&mut rng, 0.0, 1.0, f64::NEG_INFINITY, -50.0).unwrap();
            assert!(w < -50.0);
        }
    }

    #[test]
    fn tail_sampler_matches_analytic_mean() {
        // E[Z | Z > a] = φ(a) / (1 - Φ(a)).
        let mut rng = RngStream::new(4, 0);
        let a = 7.0;
        let xs: Vec<f64> = (0..100_000)
            .map(|_| sample_truncated_normal(&mut rng, 0.0, 1.0, a, f64::INFINITY).unwrap())
            .collect();
        let (m, se) = mean_and_se(&xs);
        let phi = (-0.5 * a * a).exp() / (2.0 * PI).sqrt();
        let exact = phi / ln_std_normal_sf(a).exp();
        assert!((m - exact).abs() < 3.0 * se, "{m} vs {exact}");
    }

    #[test]
    fn two_sided_moderate_mean() {
        let mut rng = RngStream::new(5, 0);
        let (mu, s, lo, hi) = (1.0, 2.0, -1.0, 4.0);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| sample_truncated_normal(&mut rng, mu, s, lo, hi).unwrap())
            .collect();
        let (a, b) = ((lo - mu) / s, (hi - mu) / s);
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
        let exact = mu + s * (pdf(a) - pdf(b)) / (std_normal_cdf(b) - std_normal_cdf(a));
        let (m, se) = mean_and_se(&xs);
        assert!((m - exact).abs() < 3.0 * se, "{m} vs {exact}");
    }

    #[test]
    fn truncated_normal_rejects_bad_input() {
        let mut rng = RngStream::new(0, 0);
        assert!(sample_truncated_normal(&mut rng, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(sample_truncated_normal(&mut rng, 0.0, 1.0, 2.0, 1.0).is_err());
        assert!(sample_truncated_normal(&mut rng, 0.0, 0.0, 0.0, 1.0).is_err());
        assert!(sample_truncated_normal(&mut rng, f64::NAN, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn inverse_gamma_moments() {
        let mut rng = RngStream::new(6, 0);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| sample_inverse_gamma(&mut rng, 3.0, 2.0).unwrap())
            .collect();
        assert!(xs.iter().all(|&x| x > 0.0));
        let (m, _) = mean_and_se(&xs);
        assert!((m - 1.0).abs() < 0.03, "{m}");

        let ys: Vec<f64> = (0..100_000)
            .map(|_| sample_inverse_gamma(&mut rng, 100.0, 99.0).unwrap())
            .collect();
        let (m, se) = mean_and_se(&ys);
        assert!((m - 1.0).abs() < 3.0 * se);
        let var = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (ys.len() as f64 - 1.0);
        // b² / ((a-1)²(a-2)) = 99² / (99² · 98).
        assert!((var - 1.0 / 98.0).abs() < 0.001, "{var}");

        assert!(sample_inverse_gamma(&mut rng, 0.0, 1.0).is_err());
        assert!(sample_inverse_gamma(&mut rng, 1.0, -1.0).is_err());
    }

    #[test]
    fn beta_moments() {
        let mut rng = RngStream::new(7, 0);
        let u: Vec<f64> = (0..100_000)
            .map(|_| sample_beta(&mut rng, 1.0, 1.0).unwrap())
            .collect();
        assert!(u.iter().all(|&x| x > 0.0 && x < 1.0));
        assert!((mean_and_se(&u).0 - 0.5).abs() < 0.005);
        let v: Vec<f64> = (0..100_000)
            .map(|_| sample_beta(&mut rng, 2.0, 8.0).unwrap())
            .collect();
        assert!((mean_and_se(&v).0 - 0.2).abs() < 0.004);
        assert!(sample_beta(&mut rng, 0.0, 1.0).is_err());
    }

    #[test]
    fn categorical_frequencies() {
        let mut rng = RngStream::new(8, 0);
        for _ in 0..1000 {
            assert_eq!(sample_categorical(&mut rng, &[0.0, 1.0, 0.0]).unwrap(), 1);
        }
        let n = 100_000;
        let f = (0..n)
            .filter(|_| sample_categorical(&mut rng, &[1.0, 1.0]).unwrap() == 0)
            .count() as f64
            / n as f64;
        assert!((f - 0.5).abs() < 0.005, "{f}");
        let f = (0..n)
            .filter(|_| sample_categorical(&mut rng, &[2.0, 1.0, 1.0]).unwrap() == 0)
            .count() as f64
            / n as f64;
        assert!((f - 0.5).abs() < 0.005, "{f}");
        assert!(sample_categorical(&mut rng, &[0.0, 0.0]).is_err());
        assert!(sample_categorical(&mut rng, &[1.0, -1.0]).is_err());
        assert!(sample_categorical(&mut rng, &[]).is_err());
    }

    fn prior_update(n: usize, y: Vec<f64>) -> GaussianRegressionUpdate {
        GaussianRegressionUpdate {
            design: DMatrix::identity(n, 2),
            response: DVector::from_vec(y),
            prior_mean: DVector::zeros(2),
            prior_var: DVector::from_element(2, 10.0),
            residual_var: 1.0,
        }
    }

    #[test]
    fn conjugate_identity_design() {
        let u = prior_update(2, vec![1.0, 1.0]);
        let post =
            GaussianPosterior::from_stats(&u.stats(), &u.prior_mean, &u.prior_var, 1.0).unwrap();
        assert!((post.mean[0] - 10.0 / 11.0).abs() < 1e-14);
        assert!((post.mean[1] - 10.0 / 11.0).abs() < 1e-14);
        let cov = post.covariance();
        assert!((cov[(0, 0)] - 10.0 / 11.0).abs() < 1e-14);
        assert!(cov[(0, 1)].abs() < 1e-14);

        let mut rng = RngStream::new(9, 0);
        let draws: Vec<DVector<f64>> = (0..50_000)
            .map(|_| conjugate_regression_draw(&mut rng, &u).unwrap())
            .collect();
        let m0: Vec<f64> = draws.iter().map(|d| d[0]).collect();
        let (m, se) = mean_and_se(&m0);
        assert!((m - 10.0 / 11.0).abs() < 3.0 * se);
        let v = m0.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 49_999.0;
        assert!((v - 10.0 / 11.0).abs() < 0.03, "{v}");
    }

    #[test]
    fn conjugate_empty_design_is_prior() {
        let u = GaussianRegressionUpdate {
            design: DMatrix::zeros(0, 3),
            response: DVector::zeros(0),
            prior_mean: DVector::zeros(3),
            prior_var: DVector::from_element(3, 10.0),
            residual_var: 1.0,
        };
        let post =
            GaussianPosterior::from_stats(&u.stats(), &u.prior_mean, &u.prior_var, 1.0).unwrap();
        assert_eq!(post.mean, DVector::zeros(3));
        let cov = post.covariance();
        for j in 0..3 {
            assert!((cov[(j, j)] - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dogmatic_prior_pins_draws() {
        let mut u = prior_update(2, vec![5.0, -5.0]);
        u.prior_mean = DVector::from_vec(vec![0.3, -0.7]);
        u.prior_var = DVector::from_element(2, 1e-8);
        let mut rng = RngStream::new(10, 0);
        for _ in 0..1000 {
            let d = conjugate_regression_draw(&mut rng, &u).unwrap();
            assert!((d[0] - 0.3).abs() < 1e-3 && (d[1] + 0.7).abs() < 1e-3);
        }
    }

    #[test]
    fn conjugate_rejects_bad_dimensions() {
        let mut u = prior_update(2, vec![1.0, 1.0]);
        u.prior_var = DVector::from_element(2, 0.0);
        assert!(conjugate_regression_draw(&mut RngStream::new(0, 0), &u).is_err());
        let mut u = prior_update(2, vec![1.0, 1.0]);
        u.response = DVector::zeros(3);
        assert!(conjugate_regression_draw(&mut RngStream::new(0, 0), &u).is_err());
    }

    #[test]
    fn log_marginal_matches_direct_gaussian_density() {
        // y ~ N(0, σ² I + X V0 X') for a 3×2 design, evaluated directly.
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![0.4, -0.3, 1.2]);
        let u = GaussianRegressionUpdate {
            design: x.clone(),
            response: y.clone(),
            prior_mean: DVector::from_vec(vec![0.5, -0.2]),
            prior_var: DVector::from_vec(vec![2.0, 0.7]),
            residual_var: 0.8,
        };
        let st = u.stats();
        let post = GaussianPosterior::from_stats(&st, &u.prior_mean, &u.prior_var, 0.8).unwrap();
        let lm = post.log_marginal(&st, &u.prior_mean, &u.prior_var, 0.8);

        let cov = DMatrix::identity(3, 3) * 0.8
            + &x * DMatrix::from_diagonal(&u.prior_var) * x.transpose();
        let mu = &x * &u.prior_mean;
        let r = &y - mu;
        let chol = cov.clone().cholesky().unwrap();
        let quad = r.dot(&chol.solve(&r));
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let direct = -1.5 * (2.0 * PI).ln() - 0.5 * logdet - 0.5 * quad;
        assert!((lm - direct).abs() < 1e-12, "{lm} vs {direct}");
    }

    #[test]
    fn spike_slab_uninformative_regressor() {
        let r = vec![0.3, -1.0, 2.0];
        let x = vec![0.0; 3];
        let input = SpikeSlabInput {
            residual: &r,
            regressor: &x,
            residual_var: 1.0,
            slab_mean: 0.4,
            slab_var: 2.0,
            spike_prob: 0.37,
        };
        assert!((spike_posterior_probability(&input).unwrap() - 0.37).abs() < 1e-15);
    }

    /// Exact spike posterior by 1-D quadrature of the slab marginal likelihood.
    fn quadrature_spike_prob(r: &[f64], x: &[f64], s2: f64, m: f64, v: f64, pi: f64) -> f64 {
        let loglik = |g: f64| -> f64 {
            r.iter()
                .zip(x)
                .map(|(ri, xi)| -0.5 * (ri - g * xi).powi(2) / s2)
                .sum()
        };
        let l0 = loglik(0.0);
        // Trapezoid over ±12 slab sd around the data-driven mode.
        let (lo, hi) = (m - 12.0 * v.sqrt() - 5.0, m + 12.0 * v.sqrt() + 5.0);
        let k = 200_000;
        let step = (hi - lo) / k as f64;
        let mut acc = 0.0;
        for i in 0..=k {
            let g = lo + i as f64 * step;
            let w = if i == 0 || i == k { 0.5 } else { 1.0 };
            let prior = (-0.5 * (g - m).powi(2) / v).exp() / (2.0 * PI * v).sqrt();
            acc += w * prior * (loglik(g) - l0).exp();
        }
        let bf_slab = acc * step;
        pi / (pi + (1.0 - pi) * bf_slab)
    }

    #[test]
    fn spike_slab_matches_quadrature_under_null() {
        let mut rng = RngStream::new(11, 0);
        let n = 50;
        let mut total = 0.0;
        let reps = 200;
        for rep in 0..reps {
            let x: Vec<f64> = (0..n).map(|i| f64::from((i + rep) % 2 == 0)).collect();
            let r: Vec<f64> = (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let input = SpikeSlabInput {
                residual: &r,
                regressor: &x,
                residual_var: 1.0,
                slab_mean: 0.0,
                slab_var: 1.0,
                spike_prob: 0.5,
            };
            let p = spike_posterior_probability(&input).unwrap();
            if rep < 5 {
                let q = quadrature_spike_prob(&r, &x, 1.0, 0.0, 1.0, 0.5);
                assert!((p - q).abs() < 1e-6, "{p} vs {q}");
            }
            total += p;
        }
        assert!(total / reps as f64 > 0.5);
    }

    #[test]
    fn spike_slab_detects_strong_signal() {
        let mut rng = RngStream::new(12, 0);
        let n = 500;
        let x: Vec<f64> = (0..n).map(|i| f64::from(i % 2 == 0)).collect();
        let r: Vec<f64> = x
            .iter()
            .map(|xi| 2.0 * xi + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let input = SpikeSlabInput {
            residual: &r,
            regressor: &x,
            residual_var: 1.0,
            slab_mean: 0.0,
            slab_var: 1.0,
            spike_prob: 0.5,
        };
        let p = spike_posterior_probability(&input).unwrap();
        assert!(p < 0.01, "{p}");
        let q = quadrature_spike_prob(&r, &x, 1.0, 0.0, 1.0, 0.5);
        assert!((p - q).abs() < 1e-9);
        let d = spike_slab_draw(&mut rng, &input).unwrap();
        assert!(!d.in_spike);
        assert!((d.coefficient - 2.0).abs() < 0.5);
    }

    #[test]
    fn spike_draw_has_exact_zero() {
        let r = vec![0.0; 4];
        let x = vec![0.0; 4];
        let input = SpikeSlabInput {
            residual: &r,
            regressor: &x,
            residual_var: 1.0,
            slab_mean: 0.0,
            slab_var: 1.0,
            spike_prob: 0.999_999,
        };
        let mut rng = RngStream::new(13, 0);
        let mut spikes = 0;
        for _ in 0..100 {
            let d = spike_slab_draw(&mut rng, &input).unwrap();
            if d.in_spike {
                spikes += 1;
                assert_eq!(d.coefficient, 0.0);
            }
        }
        assert!(spikes >= 99);
        let bad = SpikeSlabInput {
            spike_prob: 1.0,
            ..input
        };
        assert!(spike_slab_draw(&mut rng, &bad).is_err());
    }

    #[test]
    fn gauss_hermite_integrates_polynomials() {
        let (x, w) = gauss_hermite(15);
        let total: f64 = w.iter().sum();
        assert!((total - PI.sqrt()).abs() < 1e-12);
        // ∫ x⁴ e^{-x²} = 3√π/4.
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m4 - 0.75 * PI.sqrt()).abs() < 1e-12);
        let (nx, nw) = normal_quadrature(20, 1.0, 10.0);
        let var: f64 = nx.iter().zip(&nw).map(|(x, w)| w * (x - 1.0).powi(2)).sum();
        assert!((var - 10.0).abs() < 1e-10);
    }
}
