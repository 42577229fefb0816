//! The generalized posterior exp(−n·loss(θ))·π(θ): priors, random-walk
//! Metropolis sampling, the normal approximation, and credible intervals.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::calibration::CalibrationEstimate;
use crate::error::{Error, Result};
use crate::models::DomainBox;
use crate::numerics::{min_eigenvalue, pd_inverse, symmetrize};
use crate::scaling::ScalingAdjustment;

/// Minimum number of draws for a sample-based interval.
pub const MIN_INTERVAL_DRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Prior {
    UniformBox {
        domain: DomainBox,
    },
    /// Independent normals, restricted to `support`.
    IndependentNormal {
        means: Vec<f64>,
        variances: Vec<f64>,
        support: DomainBox,
    },
}

impl Prior {
    pub fn uniform(domain: &DomainBox) -> Self {
        Self::UniformBox {
            domain: domain.clone(),
        }
    }

    pub fn normal(means: Vec<f64>, variances: Vec<f64>, support: &DomainBox) -> Result<Self> {
        if means.len() != support.dim() || variances.len() != support.dim() {
            return Err(Error::Parameter(
                "prior means and variances must have length p".into(),
            ));
        }
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Parameter(format!(
                "prior variances must be positive, got {variances:?}"
            )));
        }
        Ok(Self::IndependentNormal {
            means,
            variances,
            support: support.clone(),
        })
    }

    pub fn support(&self) -> &DomainBox {
        match self {
            Self::UniformBox { domain } => domain,
            Self::IndependentNormal { support, .. } => support,
        }
    }

    /// log π(θ) up to a constant; −∞ off the support.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if !self.support().contains(theta) {
            return f64::NEG_INFINITY;
        }
        match self {
            Self::UniformBox { .. } => 0.0,
            Self::IndependentNormal {
                means, variances, ..
            } => {
                -0.5 * theta
                    .iter()
                    .zip(means.iter().zip(variances))
                    .map(|(t, (m, v))| (t - m).powi(2) / v)
                    .sum::<f64>()
            }
        }
    }
}

/// −n·loss(θ) + log π(θ); −∞ off the support or where the loss is not finite.
pub fn log_gen_posterior(
    theta: &[f64],
    loss: impl Fn(&[f64]) -> f64,
    prior: &Prior,
    n: usize,
) -> f64 {
    let lp = prior.log_density(theta);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    let l = loss(theta);
    if !l.is_finite() {
        return f64::NEG_INFINITY;
    }
    -(n as f64) * l + lp
}

/// Closed-form posterior for η = θx on [0, 1] under a N(0, τ²) prior and
/// loss weight γ: returns (mean, variance).
pub fn conjugate_reference(theta_hat: f64, n: usize, tau2: f64, gamma: f64) -> (f64, f64) {
    let shrink = 1.0 + 3.0 / (2.0 * n as f64 * tau2 * gamma);
    (
        theta_hat / shrink,
        (3.0 / (2.0 * n as f64 * gamma)) / shrink,
    )
}

/// Normal approximation N(mean, covariance).
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceApprox {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl LaplaceApprox {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let covariance = symmetrize(&covariance);
        if covariance.nrows() != mean.len() || !(min_eigenvalue(&covariance) > 0.0) {
            return Err(Error::SingularCurvature(
                "approximate posterior covariance is not positive definite".into(),
            ));
        }
        Ok(Self { mean, covariance })
    }

    pub fn sd(&self) -> Vec<f64> {
        (0..self.mean.len())
            .map(|i| self.covariance[(i, i)].sqrt())
            .collect()
    }
}

/// N(θ̂, (n·S)⁻¹) with S = V̂, γV̂ or Γ̃ᵀV̂Γ̃ according to the adjustment.
pub fn laplace(
    est: &CalibrationEstimate,
    adj: &ScalingAdjustment,
    n: usize,
) -> Result<LaplaceApprox> {
    let v = &est.hessian;
    let s = match adj {
        ScalingAdjustment::None => v.clone(),
        ScalingAdjustment::Magnitude { gamma, .. } => v * *gamma,
        ScalingAdjustment::Curvature { matrix, .. } => matrix.transpose() * v * matrix,
    };
    let precision = symmetrize(&s) * n as f64;
    let cov = pd_inverse(&precision).ok_or_else(|| {
        Error::SingularCurvature("scaled curvature is not positive definite".into())
    })?;
    LaplaceApprox::new(est.theta_hat.clone(), cov)
}

/// Random-walk Metropolis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Iterations per chain, burn-in included.
    pub iterations: usize,
    pub burn_in_fraction: f64,
    pub thin: usize,
    pub target_acceptance: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iterations: 20_000,
            burn_in_fraction: 0.5,
            thin: 4,
            target_acceptance: 0.35,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.iterations == 0 || self.thin == 0 {
            return Err(Error::Parameter(
                "chains, iterations and thin must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::Parameter(
                "burn-in fraction must be in [0, 1)".into(),
            ));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::Parameter(
                "target acceptance must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn burn_in(&self) -> usize {
        (self.iterations as f64 * self.burn_in_fraction).floor() as usize
    }
}

/// Post burn-in, thinned draws from all chains.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    /// One row per draw, chains concatenated in chain order.
    pub draws: Vec<Vec<f64>>,
    pub chain_of: Vec<usize>,
    pub chain_count: usize,
    pub seed: u64,
    /// Post burn-in acceptance rate, pooled over chains.
    pub acceptance_rate: f64,
    pub chain_acceptance: Vec<f64>,
    /// Split-R̂ per coordinate.
    pub rhat: Vec<f64>,
    /// Effective sample size per coordinate.
    pub ess: Vec<f64>,
    pub warnings: Vec<String>,
}

impl PosteriorSample {
    pub fn p(&self) -> usize {
        self.draws.first().map_or(0, |d| d.len())
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[j]).collect()
    }

    fn chain_columns(&self, j: usize) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.chain_count];
        for (d, c) in self.draws.iter().zip(&self.chain_of) {
            out[*c].push(d[j]);
        }
        out
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.p()).map(|j| mean(&self.column(j))).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        (0..self.p()).map(|j| variance(&self.column(j))).collect()
    }

    pub fn sd(&self) -> Vec<f64> {
        self.variance().into_iter().map(f64::sqrt).collect()
    }

    /// Monte-Carlo standard error of the posterior mean, per coordinate.
    pub fn mcse_mean(&self) -> Vec<f64> {
        (0..self.p())
            .map(|j| (variance(&self.column(j)) / self.ess[j]).sqrt())
            .collect()
    }

    /// Monte-Carlo standard error of the posterior variance, per coordinate,
    /// from the effective size of the squared-deviation series.
    pub fn mcse_variance(&self) -> Vec<f64> {
        (0..self.p())
            .map(|j| {
                let m = mean(&self.column(j));
                let sq: Vec<Vec<f64>> = self
                    .chain_columns(j)
                    .into_iter()
                    .map(|c| c.into_iter().map(|v| (v - m).powi(2)).collect())
                    .collect();
                let all: Vec<f64> = sq.iter().flatten().copied().collect();
                (variance(&all) / effective_sample_size(&sq)).sqrt()
            })
            .collect()
    }

    /// CSV with columns theta_1..theta_p, chain.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.p()).map(|j| format!("theta_{j}")).collect();
        header.push("chain".into());
        w.write_record(&header)?;
        for (d, c) in self.draws.iter().zip(&self.chain_of) {
            let mut rec: Vec<String> = d.iter().map(|v| format!("{v:?}")).collect();
            rec.push(c.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0).max(1.0)
}

fn autocovariance(x: &[f64], lag: usize) -> f64 {
    let m = mean(x);
    let n = x.len();
    (0..n - lag)
        .map(|i| (x[i] - m) * (x[i + lag] - m))
        .sum::<f64>()
        / n as f64
}

/// Split-R̂ over chains (each chain halved).
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let h = c.len() / 2;
            [&c[..h], &c[c.len() - h..]]
        })
        .collect();
    let n = halves.iter().map(|h| h.len()).min().unwrap_or(0);
    if halves.len() < 2 || n < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = halves.iter().map(|h| variance(h)).sum::<f64>() / halves.len() as f64;
    let b_over_n = variance(&means);
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if w == 0.0 {
        return if b_over_n == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (var_plus / w).sqrt()
}

/// Multi-chain effective sample size with Geyer's initial positive sequence.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return (m * n) as f64;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let w = chains.iter().map(|c| variance(c)).sum::<f64>() / m as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let b_over_n = if m > 1 { variance(&means) } else { 0.0 };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if !(var_plus > 0.0) {
        return (m * n) as f64;
    }
    let rho = |lag: usize| {
        let acov = chains.iter().map(|c| autocovariance(c, lag)).sum::<f64>() / m as f64;
        1.0 - (w - acov) / var_plus
    };
    let mut tau = -1.0;
    let mut k = 0;
    let mut prev = f64::INFINITY;
    while 2 * k + 1 < n {
        let pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        // monotone sequence estimator
        let pair = pair.min(prev);
        tau += 2.0 * pair;
        prev = pair;
        k += 1;
    }
    let total = (m * n) as f64;
    // antithetic chains can push τ below 1; cap ESS at total·log10(total)
    total / tau.max(1.0 / total.log10())
}

fn run_chain<F>(
    log_density: &F,
    start: &[f64],
    chol: &DMatrix<f64>,
    config: &SamplerConfig,
    seed: u64,
    chain: usize,
) -> (Vec<Vec<f64>>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let p = start.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    let burn = config.burn_in();
    let mut log_scale = (2.38 / (p as f64).sqrt()).ln();

    // dispersed start: θ̂ plus a small draw from the proposal shape
    let mut current = start.to_vec();
    for _ in 0..100 {
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cand: Vec<f64> = (chol * z * 0.5)
            .iter()
            .zip(start)
            .map(|(d, s)| s + d)
            .collect();
        if log_density(&cand).is_finite() {
            current = cand;
            break;
        }
    }
    let mut lp = log_density(&current);

    let mut draws = Vec::with_capacity((config.iterations - burn) / config.thin + 1);
    let mut accepted = 0usize;
    let mut z = DVector::zeros(p);
    for t in 0..config.iterations {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let step = chol * &z * log_scale.exp();
        let cand: Vec<f64> = current
            .iter()
            .zip(step.iter())
            .map(|(c, s)| c + s)
            .collect();
        let lp_cand = log_density(&cand);
        let u: f64 = rng.random();
        let accept = lp_cand.is_finite() && u.ln() < lp_cand - lp;
        if accept {
            current = cand;
            lp = lp_cand;
        }
        if t < burn {
            let a = if accept { 1.0 } else { 0.0 };
            log_scale += (a - config.target_acceptance) * ((t + 1) as f64).powf(-0.6);
        } else {
            if accept {
                accepted += 1;
            }
            if (t - burn) % config.thin == 0 {
                draws.push(current.clone());
            }
        }
    }
    let kept = (config.iterations - burn).max(1);
    (draws, accepted as f64 / kept as f64)
}

/// Adaptive random-walk Metropolis on log π_G(θ) = −n·loss(θ) + log π(θ).
///
/// Proposals are N(0, s²Σ) with Σ the covariance of `start` and log s
/// adapted by Robbins–Monro toward the target acceptance during burn-in,
/// then frozen. Chain c uses stream c of a ChaCha8 generator seeded with
/// `seed`, so results are identical for any thread count.
pub fn sample<F>(
    loss: F,
    prior: &Prior,
    n: usize,
    start: &LaplaceApprox,
    config: &SamplerConfig,
    seed: u64,
) -> Result<PosteriorSample>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    config.validate()?;
    let log_density = |t: &[f64]| log_gen_posterior(t, &loss, prior, n);
    if !log_density(&start.mean).is_finite() {
        return Err(Error::Parameter(format!(
            "log posterior is not finite at the starting point {:?}",
            start.mean
        )));
    }
    let chol = start
        .covariance
        .clone()
        .cholesky()
        .ok_or_else(|| {
            Error::SingularCurvature("proposal covariance is not positive definite".into())
        })?
        .l();
    let results: Vec<(Vec<Vec<f64>>, f64)> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(&log_density, &start.mean, &chol, config, seed, c))
        .collect();

    let p = start.mean.len();
    let mut draws = Vec::new();
    let mut chain_of = Vec::new();
    let mut chain_acceptance = Vec::new();
    for (c, (d, acc)) in results.into_iter().enumerate() {
        chain_of.extend(std::iter::repeat_n(c, d.len()));
        draws.extend(d);
        chain_acceptance.push(acc);
    }
    let acceptance_rate = mean(&chain_acceptance);
    let mut out = PosteriorSample {
        draws,
        chain_of,
        chain_count: config.chains,
        seed,
        acceptance_rate,
        chain_acceptance,
        rhat: Vec::new(),
        ess: Vec::new(),
        warnings: Vec::new(),
    };
    for j in 0..p {
        let cols = out.chain_columns(j);
        out.rhat.push(split_rhat(&cols));
        out.ess.push(effective_sample_size(&cols));
    }
    if !(0.1..=0.6).contains(&acceptance_rate) {
        out.warnings.push(format!(
            "acceptance rate {acceptance_rate:.3} outside [0.1, 0.6]"
        ));
    }
    for (j, r) in out.rhat.iter().enumerate() {
        if !(*r < 1.05) {
            out.warnings.push(format!(
                "split R-hat {r:.4} for theta_{} is not below 1.05",
                j + 1
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalMode {
    /// Equal-tailed (α/2, 1 − α/2) quantiles.
    Quantile,
    /// Highest posterior density.
    Hpd,
}

impl std::str::FromStr for IntervalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(Self::Quantile),
            "hpd" => Ok(Self::Hpd),
            other => Err(Error::Parameter(format!(
                "unknown interval mode `{other}` (expected quantile or hpd)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Where a credible interval comes from.
#[derive(Debug, Clone, Copy)]
pub enum IntervalSource<'a> {
    Sample(&'a PosteriorSample),
    Normal(&'a LaplaceApprox),
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!(
            "level must be in (0,1), got {level}"
        )));
    }
    Ok(())
}

/// Per-coordinate interval for a normal marginal; equal-tailed and HPD agree.
pub fn normal_interval(mean: f64, sd: f64, level: f64) -> Result<Interval> {
    check_level(level)?;
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    Ok(Interval {
        lower: mean - z * sd,
        upper: mean + z * sd,
    })
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sample_interval(values: &[f64], level: f64, mode: IntervalMode) -> Interval {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    match mode {
        IntervalMode::Quantile => {
            let a = (1.0 - level) / 2.0;
            Interval {
                lower: quantile_sorted(&s, a),
                upper: quantile_sorted(&s, 1.0 - a),
            }
        }
        IntervalMode::Hpd => {
            let m = s.len();
            let k = ((level * m as f64).ceil() as usize).clamp(1, m);
            let (mut best, mut best_w) = (0, f64::INFINITY);
            for i in 0..=(m - k) {
                let w = s[i + k - 1] - s[i];
                if w < best_w {
                    best_w = w;
                    best = i;
                }
            }
            Interval {
                lower: s[best],
                upper: s[best + k - 1],
            }
        }
    }
}

/// Credible interval for each coordinate at the given level.
pub fn credible_interval(
    source: IntervalSource<'_>,
    level: f64,
    mode: IntervalMode,
) -> Result<Vec<Interval>> {
    check_level(level)?;
    match source {
        IntervalSource::Normal(l) => l
            .mean
            .iter()
            .zip(l.sd())
            .map(|(m, s)| normal_interval(*m, s, level))
            .collect(),
        IntervalSource::Sample(s) => {
            if s.len() < MIN_INTERVAL_DRAWS {
                return Err(Error::SampleSize {
                    got: s.len(),
                    need: MIN_INTERVAL_DRAWS,
                });
            }
            Ok((0..s.p())
                .map(|j| sample_interval(&s.column(j), level, mode))
                .collect())
        }
    }
}
