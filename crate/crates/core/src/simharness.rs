//! Monte-Carlo replication of the full pipeline: simulate data, smooth,
//! calibrate, scale, build the posterior, and score interval coverage of
//! θ_L².

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{
    conditional_matrices, marginal_matrices, weight_summability, ConditionalForm, SandwichMatrices,
};
use crate::calibration::{estimate_theta, minimize_l2, CalibrationEstimate, L2Objective, Method};
use crate::error::{Error, Result};
use crate::models::{lookup_scenario, DesignRule, DomainBox, MathModel, PhysicalSystem};
use crate::numerics::{
    build_rule, matrix_rows, MinimizeOptions, QuadratureRule, DEFAULT_QUAD_ORDER,
};
use crate::posterior::{
    conjugate_reference, credible_interval, laplace, normal_interval, sample, Interval,
    IntervalMode, IntervalSource, PosteriorSample, Prior, SamplerConfig,
};
use crate::scaling::{
    curvature_gamma, magnitude_gamma, variance_matching_gamma, ScaledLoss, ScalingAdjustment,
    ScalingReport,
};
use crate::smoother::{
    fit_smoother, Dataset, KernelFamily, SigmaEstimator, SmootherConfig, SmootherFit,
};

/// One way of turning a fitted loss into a posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Analysis {
    MarginalMagnitude,
    MarginalCurvature,
    ConditionalMagnitude,
    ConditionalCurvature,
    Unscaled,
    FixedGamma(f64),
    /// γ matching the exact variance of θ̂ under a normal prior (p = 1,
    /// models linear in θ only).
    VarianceMatched,
}

impl Analysis {
    /// The four scaled analyses.
    pub const SCALED: [Analysis; 4] = [
        Analysis::MarginalMagnitude,
        Analysis::MarginalCurvature,
        Analysis::ConditionalMagnitude,
        Analysis::ConditionalCurvature,
    ];
}

impl fmt::Display for Analysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MarginalMagnitude => f.write_str("marginal-magnitude"),
            Self::MarginalCurvature => f.write_str("marginal-curvature"),
            Self::ConditionalMagnitude => f.write_str("conditional-magnitude"),
            Self::ConditionalCurvature => f.write_str("conditional-curvature"),
            Self::Unscaled => f.write_str("unscaled"),
            Self::FixedGamma(g) => write!(f, "fixed-gamma:{g}"),
            Self::VarianceMatched => f.write_str("variance-matched"),
        }
    }
}

impl FromStr for Analysis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "marginal-magnitude" => Self::MarginalMagnitude,
            "marginal-curvature" => Self::MarginalCurvature,
            "conditional-magnitude" => Self::ConditionalMagnitude,
            "conditional-curvature" => Self::ConditionalCurvature,
            "unscaled" => Self::Unscaled,
            "variance-matched" => Self::VarianceMatched,
            other => {
                let g = other
                    .strip_prefix("fixed-gamma:")
                    .and_then(|g| g.parse::<f64>().ok())
                    .filter(|g| *g > 0.0 && g.is_finite())
                    .ok_or_else(|| Error::Parameter(format!("unknown analysis `{other}`")))?;
                Self::FixedGamma(g)
            }
        })
    }
}

impl TryFrom<String> for Analysis {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Analysis> for String {
    fn from(a: Analysis) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    Mcmc,
    Laplace,
    /// Closed-form normal posterior of the linear model under a normal prior.
    Conjugate,
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcmc" => Ok(Self::Mcmc),
            "laplace" => Ok(Self::Laplace),
            "conjugate" => Ok(Self::Conjugate),
            other => Err(Error::Parameter(format!(
                "unknown engine `{other}` (expected mcmc, laplace or conjugate)"
            ))),
        }
    }
}

/// Prior family; normal priors are centered at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorSpec {
    Uniform,
    Normal { tau2: f64 },
}

/// Where σ² comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sigma2Source {
    /// Plug-in estimate from the smoother.
    Estimated,
    /// The simulating system's true σ².
    Known,
}

/// Everything that determines a study's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub scenario: String,
    pub replicates: usize,
    /// Sample size; `None` uses the scenario default.
    pub n: Option<usize>,
    pub seed: u64,
    pub analyses: Vec<Analysis>,
    pub interval: IntervalMode,
    pub level: f64,
    pub engine: Engine,
    pub quad_order: usize,
    pub conditional_form: ConditionalForm,
    pub kernel: KernelFamily,
    pub sigma_estimator: SigmaEstimator,
    pub sigma2: Sigma2Source,
    /// `None` picks N(0, 1) for the linear model and uniform otherwise.
    pub prior: Option<PriorSpec>,
    pub sampler: SamplerConfig,
    /// Under the Laplace engine, also run MCMC on this many leading replicates.
    pub mcmc_spot_check: usize,
    pub optimizer_starts: usize,
    /// Equidistant designs include both endpoints when true, and use cell
    /// midpoints otherwise.
    pub design_endpoints: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            scenario: "scenario2".into(),
            replicates: 200,
            n: None,
            seed: 1,
            analyses: Analysis::SCALED.to_vec(),
            interval: IntervalMode::Quantile,
            level: 0.95,
            engine: Engine::Laplace,
            quad_order: DEFAULT_QUAD_ORDER,
            conditional_form: ConditionalForm::Derived,
            kernel: KernelFamily::Gaussian,
            sigma_estimator: SigmaEstimator::Gcv,
            sigma2: Sigma2Source::Estimated,
            prior: None,
            sampler: SamplerConfig::default(),
            mcmc_spot_check: 20,
            optimizer_starts: 10,
            design_endpoints: true,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let (model, system) = lookup_scenario(&self.scenario)?;
        if self.replicates == 0 {
            return Err(Error::Parameter("replicates must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Parameter(format!(
                "level must be in (0,1), got {}",
                self.level
            )));
        }
        if self.n.unwrap_or(system.default_n()) < 3 {
            return Err(Error::Parameter("n must be at least 3".into()));
        }
        if self.quad_order < 2 {
            return Err(Error::Parameter("quad_order must be at least 2".into()));
        }
        if self.optimizer_starts == 0 {
            return Err(Error::Parameter(
                "optimizer_starts must be at least 1".into(),
            ));
        }
        if self.analyses.is_empty() {
            return Err(Error::Parameter("at least one analysis is required".into()));
        }
        self.sampler.validate()?;
        let prior = self.prior_spec();
        if let PriorSpec::Normal { tau2 } = prior {
            if !(tau2 > 0.0 && tau2.is_finite()) {
                return Err(Error::Parameter(format!(
                    "prior tau2 must be positive, got {tau2}"
                )));
            }
        }
        let linear = self.scenario == "simple-linear";
        if self.engine == Engine::Conjugate
            && !(linear && matches!(prior, PriorSpec::Normal { .. }))
        {
            return Err(Error::Parameter(
                "the conjugate engine needs the simple-linear scenario with a normal prior".into(),
            ));
        }
        if self.analyses.contains(&Analysis::VarianceMatched) {
            if model.p() != 1 || !linear {
                return Err(Error::Parameter(
                    "variance-matched scaling needs the simple-linear scenario".into(),
                ));
            }
            if !matches!(prior, PriorSpec::Normal { .. }) {
                return Err(Error::Parameter(
                    "variance-matched scaling needs a normal prior".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn prior_spec(&self) -> PriorSpec {
        self.prior.unwrap_or(if self.scenario == "simple-linear" {
            PriorSpec::Normal { tau2: 1.0 }
        } else {
            PriorSpec::Uniform
        })
    }

    fn smoother_config(&self) -> SmootherConfig {
        SmootherConfig {
            family: self.kernel,
            sigma: self.sigma_estimator,
            ..SmootherConfig::default()
        }
    }

    fn build_prior(&self, model: &MathModel) -> Result<Prior> {
        match self.prior_spec() {
            PriorSpec::Uniform => Ok(Prior::uniform(model.theta_box())),
            PriorSpec::Normal { tau2 } => Prior::normal(
                vec![0.0; model.p()],
                vec![tau2; model.p()],
                model.theta_box(),
            ),
        }
    }
}

/// Design points by the system's rule, then yᵢ = μ(xᵢ) + σεᵢ.
pub fn generate_replicate(
    system: &PhysicalSystem,
    n: usize,
    x_box: &DomainBox,
    seed: u64,
) -> Result<Dataset> {
    generate_replicate_with(system, n, x_box, seed, true)
}

/// As [`generate_replicate`]; `endpoints = false` places equidistant points
/// at the midpoints of n equal cells.
pub fn generate_replicate_with(
    system: &PhysicalSystem,
    n: usize,
    x_box: &DomainBox,
    seed: u64,
    endpoints: bool,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Parameter("n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let design: Vec<Vec<f64>> = match system.design() {
        DesignRule::UniformRandom => (0..n)
            .map(|_| {
                (0..x_box.dim())
                    .map(|j| x_box.lower()[j] + x_box.width(j) * rng.random::<f64>())
                    .collect()
            })
            .collect(),
        DesignRule::Equidistant { lower, upper } => {
            if x_box.dim() != 1 {
                return Err(Error::Parameter(
                    "equidistant designs need one input".into(),
                ));
            }
            if n == 1 || !endpoints {
                (0..n)
                    .map(|i| vec![lower + (upper - lower) * (i as f64 + 0.5) / n as f64])
                    .collect()
            } else {
                (0..n)
                    .map(|i| vec![lower + (upper - lower) * i as f64 / (n - 1) as f64])
                    .collect()
            }
        }
    };
    let y: Vec<f64> = design
        .iter()
        .map(|x| system.mu(x) + system.sigma() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Dataset::new(design, y)
}

/// θ_L²: minimizer of ∫(μ − η)² over `domain` by quadrature.
pub fn theta_l2_on(
    model: &MathModel,
    system: &PhysicalSystem,
    domain: &DomainBox,
    quad_order: usize,
) -> Result<Vec<f64>> {
    let rule = build_rule(domain, quad_order)?;
    let obj = L2Objective::population(model, system, &rule)?;
    let est = minimize_l2(&obj, &MinimizeOptions::default().with_starts(20))?;
    Ok(est.theta_hat)
}

/// θ_L² over the model's input box.
pub fn theta_l2(model: &MathModel, system: &PhysicalSystem, quad_order: usize) -> Result<Vec<f64>> {
    theta_l2_on(model, system, model.x_box(), quad_order)
}

/// Posterior summary for one analysis of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub analysis: Analysis,
    pub engine: Engine,
    pub scaling: Option<ScalingReport>,
    pub post_mean: Vec<f64>,
    pub post_sd: Vec<f64>,
    pub intervals: Vec<Interval>,
    /// Whether each interval contains θ_L², when it is known.
    pub covers: Vec<bool>,
    pub flags: Vec<String>,
    /// Set when the analysis could not be completed.
    pub error: Option<String>,
}

impl AnalysisRecord {
    fn failed(analysis: Analysis, engine: Engine, err: &Error) -> Self {
        Self {
            analysis,
            engine,
            scaling: None,
            post_mean: vec![],
            post_sd: vec![],
            intervals: vec![],
            covers: vec![],
            flags: vec![],
            error: Some(err.to_string()),
        }
    }

    pub fn completed(&self) -> bool {
        self.error.is_none()
    }
}

/// Everything computed for one simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub seed: u64,
    pub theta_hat: Vec<f64>,
    pub sigma2: f64,
    pub lambda: f64,
    pub rho: Vec<f64>,
    pub flags: Vec<String>,
    pub analyses: Vec<AnalysisRecord>,
    /// MCMC reruns of the analyses (spot check under the Laplace engine).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spot_check: Option<Vec<AnalysisRecord>>,
    pub error: Option<String>,
}

/// The fitted pieces shared by every analysis of one dataset.
pub struct Prepared {
    pub model: MathModel,
    pub rule: QuadratureRule,
    pub fit: SmootherFit,
    pub estimate: CalibrationEstimate,
    pub objective: L2Objective,
    pub flags: Vec<String>,
}

/// Smooths `data`, and computes θ̂_TW and its Hessian.
pub fn prepare(
    data: &Dataset,
    model: &MathModel,
    rule: &QuadratureRule,
    config: &StudyConfig,
    known_sigma2: Option<f64>,
    seed: u64,
) -> Result<Prepared> {
    data.check_in_box(model.x_box())?;
    let mut fit = fit_smoother(data, &config.smoother_config())?;
    if let Some(s2) = known_sigma2 {
        fit = fit.with_sigma2(s2)?;
    }
    let opts = MinimizeOptions::default()
        .with_seed(seed)
        .with_starts(config.optimizer_starts);
    let estimate = estimate_theta(&fit, model, rule, Method::TW, &opts)?;
    let mut flags = Vec::new();
    if !estimate.converged {
        flags.push("optimizer did not converge".to_string());
    }
    if !estimate.interior {
        flags.push("theta_hat on the parameter box boundary".to_string());
    }
    let objective = L2Objective::from_fit(&fit, model, rule)?;
    Ok(Prepared {
        model: model.clone(),
        rule: rule.clone(),
        fit,
        estimate,
        objective,
        flags,
    })
}

fn sandwich_for(
    prep: &Prepared,
    conditional: bool,
    form: ConditionalForm,
) -> Result<SandwichMatrices> {
    if conditional {
        conditional_matrices(&prep.estimate, &prep.fit, &prep.model, &prep.rule, form)
    } else {
        marginal_matrices(&prep.estimate, &prep.fit, &prep.model, &prep.rule)
    }
}

/// Loss adjustment for an analysis.
pub fn adjustment_for(
    prep: &Prepared,
    analysis: Analysis,
    config: &StudyConfig,
) -> Result<ScalingAdjustment> {
    let form = config.conditional_form;
    match analysis {
        Analysis::Unscaled => Ok(ScalingAdjustment::None),
        Analysis::FixedGamma(g) => ScalingAdjustment::fixed_gamma(g),
        Analysis::MarginalMagnitude => magnitude_gamma(&sandwich_for(prep, false, form)?),
        Analysis::ConditionalMagnitude => magnitude_gamma(&sandwich_for(prep, true, form)?),
        Analysis::MarginalCurvature => {
            curvature_gamma(&sandwich_for(prep, false, form)?, &prep.estimate.theta_hat)
        }
        Analysis::ConditionalCurvature => {
            curvature_gamma(&sandwich_for(prep, true, form)?, &prep.estimate.theta_hat)
        }
        Analysis::VarianceMatched => {
            let PriorSpec::Normal { tau2 } = config.prior_spec() else {
                return Err(Error::Parameter(
                    "variance-matched scaling needs a normal prior".into(),
                ));
            };
            let g = variance_matching_gamma(&prep.fit, &prep.model, &prep.rule, tau2)?;
            Ok(ScalingAdjustment::Magnitude {
                gamma: g,
                variant: None,
            })
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs one analysis on prepared data. Returns the record and, for the MCMC
/// engine, the draws.
pub fn run_analysis(
    prep: &Prepared,
    analysis: Analysis,
    engine: Engine,
    config: &StudyConfig,
    theta_true: Option<&[f64]>,
    seed: u64,
) -> Result<(AnalysisRecord, Option<PosteriorSample>)> {
    let adj = adjustment_for(prep, analysis, config)?;
    let n = prep.fit.data().n();
    let p = prep.model.p();
    let mut flags = Vec::new();
    let mut draws = None;
    let (post_mean, post_sd, intervals) = match engine {
        Engine::Laplace => {
            let lap = laplace(&prep.estimate, &adj, n)?;
            let iv =
                credible_interval(IntervalSource::Normal(&lap), config.level, config.interval)?;
            let sd = lap.sd();
            (lap.mean, sd, iv)
        }
        Engine::Conjugate => {
            let PriorSpec::Normal { tau2 } = config.prior_spec() else {
                return Err(Error::Parameter(
                    "the conjugate engine needs a normal prior".into(),
                ));
            };
            let gamma = adj
                .effective_gamma()
                .ok_or_else(|| Error::Parameter("the conjugate engine needs p = 1".into()))?;
            let (m, v) = conjugate_reference(prep.estimate.theta_hat[0], n, tau2, gamma);
            let iv = normal_interval(m, v.sqrt(), config.level)?;
            (vec![m], vec![v.sqrt()], vec![iv])
        }
        Engine::Mcmc => {
            let prior = config.build_prior(&prep.model)?;
            let start = laplace(&prep.estimate, &adj, n)?;
            let loss = ScaledLoss::new(prep.objective.clone(), adj.clone());
            let s = sample(|t| loss.eval(t), &prior, n, &start, &config.sampler, seed)?;
            flags.extend(s.warnings.iter().cloned());
            let iv = credible_interval(IntervalSource::Sample(&s), config.level, config.interval)?;
            let out = (s.mean(), s.sd(), iv);
            draws = Some(s);
            out
        }
    };
    let covers = match theta_true {
        Some(t) => (0..p).map(|j| intervals[j].contains(t[j])).collect(),
        None => vec![],
    };
    let record = AnalysisRecord {
        analysis,
        engine,
        scaling: Some(adj.report()),
        post_mean,
        post_sd,
        intervals,
        covers,
        flags,
        error: None,
    };
    Ok((record, draws))
}

/// Study-wide quantities computed once.
pub struct StudyContext {
    pub model: MathModel,
    pub system: PhysicalSystem,
    pub rule: QuadratureRule,
    pub n: usize,
    pub theta_l2: Vec<f64>,
}

impl StudyContext {
    pub fn new(config: &StudyConfig) -> Result<Self> {
        config.validate()?;
        let (model, system) = lookup_scenario(&config.scenario)?;
        let rule = build_rule(model.x_box(), config.quad_order)?;
        let n = config.n.unwrap_or(system.default_n());
        let theta_l2 = theta_l2(&model, &system, config.quad_order)?;
        Ok(Self {
            model,
            system,
            rule,
            n,
            theta_l2,
        })
    }
}

/// Replicate `index` of a study, seeded with `config.seed + index`.
pub fn run_replicate(config: &StudyConfig, ctx: &StudyContext, index: usize) -> ReplicateRecord {
    let seed = config.seed.wrapping_add(index as u64);
    let mut record = ReplicateRecord {
        index,
        seed,
        theta_hat: vec![],
        sigma2: f64::NAN,
        lambda: f64::NAN,
        rho: vec![],
        flags: vec![],
        analyses: vec![],
        spot_check: None,
        error: None,
    };
    let known = match config.sigma2 {
        Sigma2Source::Known => Some(ctx.system.sigma().powi(2)),
        Sigma2Source::Estimated => None,
    };
    let prep = generate_replicate_with(
        &ctx.system,
        ctx.n,
        ctx.model.x_box(),
        seed,
        config.design_endpoints,
    )
    .and_then(|data| prepare(&data, &ctx.model, &ctx.rule, config, known, seed));
    let prep = match prep {
        Ok(p) => p,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    record.theta_hat = prep.estimate.theta_hat.clone();
    record.sigma2 = prep.fit.sigma2_hat();
    record.lambda = prep.fit.lambda();
    record.rho = prep.fit.kernel().rho.clone();
    record.flags = prep.flags.clone();

    let run = |engine: Engine| -> Vec<AnalysisRecord> {
        config
            .analyses
            .iter()
            .enumerate()
            .map(|(k, &a)| {
                let s = splitmix(seed ^ splitmix(k as u64 + 1));
                match run_analysis(&prep, a, engine, config, Some(&ctx.theta_l2), s) {
                    Ok((r, _)) => r,
                    Err(e) => AnalysisRecord::failed(a, engine, &e),
                }
            })
            .collect()
    };
    record.analyses = run(config.engine);
    if config.engine == Engine::Laplace && index < config.mcmc_spot_check {
        record.spot_check = Some(run(Engine::Mcmc));
    }
    record
}

/// Aggregates for one coordinate of one analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateSummary {
    pub theta_l2: f64,
    pub mean_post_mean: f64,
    pub mean_post_sd: f64,
    pub coverage: f64,
    /// √(c(1 − c)/R).
    pub coverage_se: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub analysis: Analysis,
    pub engine: Engine,
    /// Replicates contributing to the averages.
    pub completed: usize,
    /// Replicates where the analysis could not be run.
    pub failed: usize,
    /// Completed replicates carrying any warning.
    pub flagged: usize,
    /// Mean of γ (magnitude scalings) or of Γ² (one-parameter curvature).
    pub mean_gamma: Option<f64>,
    pub coordinates: Vec<CoordinateSummary>,
}

/// MCMC vs normal-approximation comparison on the spot-check replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotCheck {
    pub analysis: Analysis,
    pub replicates: usize,
    /// Mean over replicates of (MCMC posterior SD) / (Laplace SD), per coordinate.
    pub sd_ratio: Vec<f64>,
    /// Fraction of replicates where both intervals agree on coverage.
    pub coverage_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub crate_version: String,
    pub quad_order: usize,
    pub first_seed: u64,
    pub last_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: StudyConfig,
    pub n: usize,
    pub theta_l2: Vec<f64>,
    /// θ_L² over the design range, when the design covers only part of X.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_l2_design_range: Option<Vec<f64>>,
    pub theta_hat_mean: Vec<f64>,
    pub theta_hat_sd: Vec<f64>,
    pub failed_replicates: usize,
    pub summaries: Vec<AnalysisSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub spot_checks: Vec<SpotCheck>,
    pub provenance: Provenance,
    pub records: Vec<ReplicateRecord>,
}

impl SimulationReport {
    pub fn summary(&self, analysis: Analysis) -> Option<&AnalysisSummary> {
        self.summaries.iter().find(|s| s.analysis == analysis)
    }

    /// Every warning, prefixed by replicate.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.records {
            if let Some(e) = &r.error {
                out.push(format!("replicate {}: {e}", r.index));
            }
            for f in &r.flags {
                out.push(format!("replicate {}: {f}", r.index));
            }
            for a in r.analyses.iter().chain(r.spot_check.iter().flatten()) {
                if let Some(e) = &a.error {
                    out.push(format!(
                        "replicate {} {} ({:?}): {e}",
                        r.index, a.analysis, a.engine
                    ));
                }
                for f in &a.flags {
                    out.push(format!(
                        "replicate {} {} ({:?}): {f}",
                        r.index, a.analysis, a.engine
                    ));
                }
            }
        }
        out
    }
}

fn mean_of(v: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

fn summarize(
    analysis_idx: usize,
    config: &StudyConfig,
    theta_l2: &[f64],
    records: &[ReplicateRecord],
) -> AnalysisSummary {
    let analysis = config.analyses[analysis_idx];
    let rows: Vec<(&ReplicateRecord, &AnalysisRecord)> = records
        .iter()
        .filter(|r| r.error.is_none())
        .map(|r| (r, &r.analyses[analysis_idx]))
        .collect();
    let done: Vec<(&ReplicateRecord, &AnalysisRecord)> = rows
        .iter()
        .copied()
        .filter(|(_, a)| a.completed())
        .collect();
    let failed = records.len() - done.len();
    let flagged = done
        .iter()
        .filter(|(r, a)| !r.flags.is_empty() || !a.flags.is_empty())
        .count();
    let gammas: Vec<f64> = done
        .iter()
        .filter_map(|(_, a)| {
            let s = a.scaling.as_ref()?;
            match (s.gamma, &s.matrix) {
                (Some(g), _) => Some(g),
                (None, Some(m)) if m.len() == 1 => Some(m[0][0] * m[0][0]),
                _ => None,
            }
        })
        .collect();
    let mean_gamma = if gammas.is_empty() {
        None
    } else {
        Some(mean_of(gammas.iter().copied()))
    };
    let r = done.len() as f64;
    let coordinates = (0..theta_l2.len())
        .map(|j| {
            let coverage = mean_of(
                done.iter()
                    .map(|(_, a)| if a.covers[j] { 1.0 } else { 0.0 }),
            );
            CoordinateSummary {
                theta_l2: theta_l2[j],
                mean_post_mean: mean_of(done.iter().map(|(_, a)| a.post_mean[j])),
                mean_post_sd: mean_of(done.iter().map(|(_, a)| a.post_sd[j])),
                coverage,
                coverage_se: (coverage * (1.0 - coverage) / r).sqrt(),
                mean_length: mean_of(done.iter().map(|(_, a)| a.intervals[j].length())),
            }
        })
        .collect();
    AnalysisSummary {
        analysis,
        engine: config.engine,
        completed: done.len(),
        failed,
        flagged,
        mean_gamma,
        coordinates,
    }
}

fn spot_check_summary(
    k: usize,
    config: &StudyConfig,
    records: &[ReplicateRecord],
) -> Option<SpotCheck> {
    let pairs: Vec<(&AnalysisRecord, &AnalysisRecord)> = records
        .iter()
        .filter_map(|r| Some((&r.analyses[k], &r.spot_check.as_ref()?[k])))
        .filter(|(a, b)| a.completed() && b.completed())
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let p = pairs[0].0.post_sd.len();
    Some(SpotCheck {
        analysis: config.analyses[k],
        replicates: pairs.len(),
        sd_ratio: (0..p)
            .map(|j| mean_of(pairs.iter().map(|(a, b)| b.post_sd[j] / a.post_sd[j])))
            .collect(),
        coverage_agreement: mean_of(
            pairs
                .iter()
                .map(|(a, b)| if a.covers == b.covers { 1.0 } else { 0.0 }),
        ),
    })
}

/// Runs every replicate on a pool of `workers` threads (all cores when
/// `None`). The report does not depend on the worker count.
pub fn run_study(config: &StudyConfig, workers: Option<usize>) -> Result<SimulationReport> {
    let ctx = StudyContext::new(config)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Parameter(format!("worker pool: {e}")))?;
    let records: Vec<ReplicateRecord> = pool.install(|| {
        (0..config.replicates)
            .into_par_iter()
            .map(|i| run_replicate(config, &ctx, i))
            .collect()
    });
    Ok(finalize(config, &ctx, records))
}

fn finalize(
    config: &StudyConfig,
    ctx: &StudyContext,
    records: Vec<ReplicateRecord>,
) -> SimulationReport {
    let p = ctx.model.p();
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let theta_hat_mean: Vec<f64> = (0..p)
        .map(|j| mean_of(ok.iter().map(|r| r.theta_hat[j])))
        .collect();
    let theta_hat_sd: Vec<f64> = (0..p)
        .map(|j| {
            let m = theta_hat_mean[j];
            let ss: f64 = ok.iter().map(|r| (r.theta_hat[j] - m).powi(2)).sum();
            if ok.len() > 1 {
                (ss / (ok.len() - 1) as f64).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let summaries = (0..config.analyses.len())
        .map(|k| summarize(k, config, &ctx.theta_l2, &records))
        .collect();
    let spot_checks = (0..config.analyses.len())
        .filter_map(|k| spot_check_summary(k, config, &records))
        .collect();
    let theta_l2_design_range = match ctx.system.design() {
        DesignRule::Equidistant { lower, upper }
            if ctx.model.k() == 1
                && (lower != ctx.model.x_box().lower()[0]
                    || upper != ctx.model.x_box().upper()[0]) =>
        {
            DomainBox::interval(lower, upper)
                .and_then(|d| theta_l2_on(&ctx.model, &ctx.system, &d, config.quad_order))
                .ok()
        }
        _ => None,
    };
    SimulationReport {
        config: config.clone(),
        n: ctx.n,
        theta_l2: ctx.theta_l2.clone(),
        theta_l2_design_range,
        theta_hat_mean,
        theta_hat_sd,
        failed_replicates: records.len() - ok.len(),
        summaries,
        spot_checks,
        provenance: Provenance {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            quad_order: config.quad_order,
            first_seed: config.seed,
            last_seed: config.seed.wrapping_add(config.replicates as u64 - 1),
        },
        records,
    }
}

/// CSV with one row per analysis and coordinate.
pub fn summary_csv(report: &SimulationReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "analysis",
        "engine",
        "coordinate",
        "theta_l2",
        "mean_post_mean",
        "mean_post_sd",
        "coverage",
        "coverage_se",
        "mean_length",
        "completed",
        "failed",
        "flagged",
    ])?;
    for s in &report.summaries {
        for (j, c) in s.coordinates.iter().enumerate() {
            w.write_record([
                s.analysis.to_string(),
                format!("{:?}", s.engine).to_lowercase(),
                (j + 1).to_string(),
                format!("{:.6}", c.theta_l2),
                format!("{:.6}", c.mean_post_mean),
                format!("{:.6}", c.mean_post_sd),
                format!("{:.4}", c.coverage),
                format!("{:.4}", c.coverage_se),
                format!("{:.6}", c.mean_length),
                s.completed.to_string(),
                s.failed.to_string(),
                s.flagged.to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Settings for the conjugate coverage table of the linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table1Config {
    pub sample_sizes: Vec<usize>,
    pub gammas: Vec<Analysis>,
    pub replicates: usize,
    pub seed: u64,
    pub tau2: f64,
    pub level: f64,
    pub interval: IntervalMode,
    pub sigma2: Sigma2Source,
    pub quad_order: usize,
    pub design_endpoints: bool,
}

impl Default for Table1Config {
    fn default() -> Self {
        Self {
            sample_sizes: vec![4, 8],
            gammas: vec![
                Analysis::FixedGamma(1.0),
                Analysis::VarianceMatched,
                Analysis::FixedGamma(15.0),
            ],
            replicates: 10_000,
            seed: 1,
            tau2: 1.0,
            level: 0.95,
            interval: IntervalMode::Hpd,
            sigma2: Sigma2Source::Known,
            quad_order: DEFAULT_QUAD_ORDER,
            design_endpoints: true,
        }
    }
}

impl Table1Config {
    pub fn study(&self, n: usize) -> StudyConfig {
        StudyConfig {
            scenario: "simple-linear".into(),
            replicates: self.replicates,
            n: Some(n),
            seed: self.seed,
            analyses: self.gammas.clone(),
            interval: self.interval,
            level: self.level,
            engine: Engine::Conjugate,
            quad_order: self.quad_order,
            sigma2: self.sigma2,
            prior: Some(PriorSpec::Normal { tau2: self.tau2 }),
            optimizer_starts: 2,
            mcmc_spot_check: 0,
            design_endpoints: self.design_endpoints,
            ..StudyConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub n: usize,
    pub gamma: Analysis,
    /// Percent.
    pub coverage: f64,
    pub coverage_se: f64,
    pub mean_length: f64,
    pub mean_gamma: Option<f64>,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Report {
    pub config: Table1Config,
    pub theta_l2: f64,
    pub rows: Vec<Table1Row>,
}

/// Coverage and mean interval length of the conjugate posterior for each
/// (n, γ) pair.
pub fn run_table1(config: &Table1Config, workers: Option<usize>) -> Result<Table1Report> {
    if config.sample_sizes.is_empty() || config.gammas.is_empty() {
        return Err(Error::Parameter(
            "table needs sample sizes and gammas".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut theta = f64::NAN;
    for &n in &config.sample_sizes {
        let report = run_study(&config.study(n), workers)?;
        theta = report.theta_l2[0];
        for s in &report.summaries {
            let c = &s.coordinates[0];
            rows.push(Table1Row {
                n,
                gamma: s.analysis,
                coverage: 100.0 * c.coverage,
                coverage_se: 100.0 * c.coverage_se,
                mean_length: c.mean_length,
                mean_gamma: s.mean_gamma,
                completed: s.completed,
                failed: s.failed,
            });
        }
    }
    Ok(Table1Report {
        config: config.clone(),
        theta_l2: theta,
        rows,
    })
}

pub fn table1_csv(report: &Table1Report) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "n",
        "gamma",
        "coverage",
        "coverage_se",
        "mean_length",
        "mean_gamma",
        "completed",
        "failed",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.n.to_string(),
            r.gamma.to_string(),
            format!("{:.2}", r.coverage),
            format!("{:.2}", r.coverage_se),
            format!("{:.4}", r.mean_length),
            r.mean_gamma.map_or(String::new(), |g| format!("{g:.4}")),
            r.completed.to_string(),
            r.failed.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Sandwich matrices in serializable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub variant: crate::asymptotics::SandwichVariant,
    pub v: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub sandwich: Vec<Vec<f64>>,
}

impl SandwichReport {
    fn from(sw: &SandwichMatrices) -> Result<Self> {
        Ok(Self {
            variant: sw.variant,
            v: matrix_rows(&sw.v),
            w: matrix_rows(&sw.w_total()),
            sandwich: matrix_rows(&sw.sandwich()?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmootherReport {
    pub kernel: KernelFamily,
    pub rho: Vec<f64>,
    pub lambda: f64,
    pub sigma2: f64,
    pub smoother_trace: f64,
    pub gcv: Option<f64>,
}

impl SmootherReport {
    pub fn from_fit(fit: &SmootherFit) -> Self {
        Self {
            kernel: fit.kernel().family,
            rho: fit.kernel().rho.clone(),
            lambda: fit.lambda(),
            sigma2: fit.sigma2_hat(),
            smoother_trace: fit.smoother_trace(),
            gcv: fit.gcv(),
        }
    }
}

/// Full single-dataset calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub scenario: String,
    pub n: usize,
    pub smoother: SmootherReport,
    pub theta_hat: Vec<f64>,
    pub loss_value: f64,
    pub converged: bool,
    pub theta_l2: Vec<f64>,
    pub sandwiches: Vec<SandwichReport>,
    pub weight_summability: f64,
    pub analyses: Vec<AnalysisRecord>,
    pub flags: Vec<String>,
}

/// Calibrates one dataset with every configured analysis. Returns the
/// report and the MCMC draws of each analysis under the MCMC engine.
pub fn calibrate_dataset(
    data: &Dataset,
    config: &StudyConfig,
) -> Result<(CalibrationReport, Vec<(Analysis, PosteriorSample)>)> {
    let ctx = StudyContext::new(config)?;
    let known = match config.sigma2 {
        Sigma2Source::Known => Some(ctx.system.sigma().powi(2)),
        Sigma2Source::Estimated => None,
    };
    let prep = prepare(data, &ctx.model, &ctx.rule, config, known, config.seed)?;
    let mut sandwiches = Vec::new();
    let mut flags = prep.flags.clone();
    for sw in [
        marginal_matrices(&prep.estimate, &prep.fit, &prep.model, &prep.rule),
        conditional_matrices(
            &prep.estimate,
            &prep.fit,
            &prep.model,
            &prep.rule,
            ConditionalForm::Literal,
        ),
        conditional_matrices(
            &prep.estimate,
            &prep.fit,
            &prep.model,
            &prep.rule,
            ConditionalForm::Derived,
        ),
    ] {
        match sw.and_then(|s| SandwichReport::from(&s)) {
            Ok(r) => sandwiches.push(r),
            Err(e) => flags.push(e.to_string()),
        }
    }
    let mut analyses = Vec::new();
    let mut draws = Vec::new();
    for (k, &a) in config.analyses.iter().enumerate() {
        let s = splitmix(config.seed ^ splitmix(k as u64 + 1));
        match run_analysis(&prep, a, config.engine, config, Some(&ctx.theta_l2), s) {
            Ok((r, d)) => {
                analyses.push(r);
                if let Some(d) = d {
                    draws.push((a, d));
                }
            }
            Err(e) => analyses.push(AnalysisRecord::failed(a, config.engine, &e)),
        }
    }
    let report = CalibrationReport {
        scenario: config.scenario.clone(),
        n: data.n(),
        smoother: SmootherReport::from_fit(&prep.fit),
        theta_hat: prep.estimate.theta_hat.clone(),
        loss_value: prep.estimate.loss_value,
        converged: prep.estimate.converged,
        theta_l2: ctx.theta_l2.clone(),
        sandwiches,
        weight_summability: weight_summability(&prep.fit, &prep.rule),
        analyses,
        flags,
    };
    Ok((report, draws))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(scenario: &str, replicates: usize) -> StudyConfig {
        StudyConfig {
            scenario: scenario.into(),
            replicates,
            mcmc_spot_check: 0,
            ..StudyConfig::default()
        }
    }

    #[test]
    fn analysis_names_round_trip() {
        for a in [
            Analysis::MarginalMagnitude,
            Analysis::MarginalCurvature,
            Analysis::ConditionalMagnitude,
            Analysis::ConditionalCurvature,
            Analysis::Unscaled,
            Analysis::FixedGamma(15.0),
            Analysis::VarianceMatched,
        ] {
            assert_eq!(a.to_string().parse::<Analysis>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(serde_json::from_str::<Analysis>(&json).unwrap(), a);
        }
        assert!("fixed-gamma:-1".parse::<Analysis>().is_err());
        assert!("sideways".parse::<Analysis>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(quick("scenario2", 3).validate().is_ok());
        assert!(quick("scenario2", 0).validate().is_err());
        assert!(StudyConfig {
            level: 1.5,
            ..quick("scenario2", 3)
        }
        .validate()
        .is_err());
        assert!(StudyConfig {
            engine: Engine::Conjugate,
            ..quick("scenario2", 3)
        }
        .validate()
        .is_err());
        assert!(StudyConfig {
            engine: Engine::Conjugate,
            ..quick("simple-linear", 3)
        }
        .validate()
        .is_ok());
        assert!(StudyConfig {
            analyses: vec![Analysis::VarianceMatched],
            ..quick("scenario3", 3)
        }
        .validate()
        .is_err());
        assert!(matches!(
            quick("nope", 3).validate(),
            Err(Error::UnknownScenario { .. })
        ));
    }

    #[test]
    fn replicate_generation() {
        let (m, s) = lookup_scenario("scenario2").unwrap();
        let a = generate_replicate(&s, 30, m.x_box(), 5).unwrap();
        let b = generate_replicate(&s, 30, m.x_box(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x(0), &[0.0]);
        assert_eq!(a.x(29), &[1.0]);
        let quiet = s.clone().with_sigma(0.0).unwrap();
        let d = generate_replicate(&quiet, 30, m.x_box(), 5).unwrap();
        for i in 0..30 {
            assert_eq!(d.responses()[i], s.mu(d.x(i)));
        }
        let mean = (0..10_000)
            .map(|k| {
                generate_replicate(&s, 30, m.x_box(), k)
                    .unwrap()
                    .responses()[0]
            })
            .sum::<f64>()
            / 10_000.0;
        assert!((mean - s.mu(&[0.0])).abs() < 3.0 * 0.2 / 100.0);
        let (m1, s1) = lookup_scenario("scenario1").unwrap();
        let u = generate_replicate(&s1, 50, m1.x_box(), 2).unwrap();
        assert!(u.check_in_box(m1.x_box()).is_ok());
        let mid = generate_replicate_with(&s, 4, m.x_box(), 5, false).unwrap();
        assert_eq!(mid.x(0), &[0.125]);
        assert_eq!(mid.x(3), &[0.875]);
    }

    #[test]
    fn noiseless_scenario2_recovers_theta_l2() {
        let cfg = quick("scenario2", 1);
        let mut ctx = StudyContext::new(&cfg).unwrap();
        ctx.system = ctx.system.clone().with_sigma(0.0).unwrap();
        let r = run_replicate(&cfg, &ctx, 0);
        assert!((r.theta_hat[0] - 1.8771).abs() < 1e-2, "{:?}", r.theta_hat);
    }

    #[test]
    fn single_replicate_report_equals_record() {
        let report = run_study(&quick("scenario2", 1), Some(1)).unwrap();
        let rec = &report.records[0];
        for (s, a) in report.summaries.iter().zip(&rec.analyses) {
            let c = &s.coordinates[0];
            assert_eq!(c.mean_post_mean, a.post_mean[0]);
            assert_eq!(c.mean_post_sd, a.post_sd[0]);
            assert_eq!(c.coverage, if a.covers[0] { 1.0 } else { 0.0 });
            assert_eq!(c.coverage_se, 0.0);
            assert_eq!(a.covers[0], a.intervals[0].contains(report.theta_l2[0]));
        }
    }

    #[test]
    fn replicates_are_independent_of_each_other() {
        let cfg = quick("scenario3", 4);
        let ctx = StudyContext::new(&cfg).unwrap();
        let all = run_study(&cfg, Some(2)).unwrap();
        assert_eq!(run_replicate(&cfg, &ctx, 2), all.records[2]);
        let shifted = StudyConfig {
            seed: cfg.seed + 2,
            replicates: 1,
            ..cfg.clone()
        };
        let mut one = run_study(&shifted, Some(1)).unwrap().records.remove(0);
        one.index = 2;
        assert_eq!(one, all.records[2]);
    }

    #[test]
    fn study_is_deterministic_across_worker_counts() {
        let cfg = StudyConfig {
            mcmc_spot_check: 1,
            sampler: SamplerConfig {
                iterations: 2000,
                ..Default::default()
            },
            ..quick("scenario1", 3)
        };
        let a = serde_json::to_string(&run_study(&cfg, Some(1)).unwrap()).unwrap();
        let b = serde_json::to_string(&run_study(&cfg, Some(3)).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("spot_check"));
    }

    #[test]
    fn table1_small_run() {
        let cfg = Table1Config {
            replicates: 50,
            ..Table1Config::default()
        };
        let t = run_table1(&cfg, None).unwrap();
        assert_eq!(t.rows.len(), 6);
        assert!((t.theta_l2 - 3.56528).abs() < 1e-4);
        let csv = table1_csv(&t).unwrap();
        assert_eq!(csv.lines().count(), 7);
        for row in &t.rows {
            assert!(row.coverage >= 0.0 && row.coverage <= 100.0);
        }
        // γ = 15 intervals are shorter than γ = 1 intervals
        assert!(t.rows[2].mean_length < t.rows[0].mean_length);
    }

    #[test]
    fn calibrate_report_has_all_pieces() {
        let cfg = StudyConfig {
            analyses: Analysis::SCALED.to_vec(),
            ..quick("scenario3", 1)
        };
        let ctx = StudyContext::new(&cfg).unwrap();
        let data = generate_replicate(&ctx.system, 17, ctx.model.x_box(), 7).unwrap();
        let (r, draws) = calibrate_dataset(&data, &cfg).unwrap();
        assert_eq!(r.sandwiches.len(), 3);
        assert_eq!(r.analyses.len(), 4);
        assert!(draws.is_empty());
        assert!(r.analyses.iter().all(|a| a.completed()));
        let mcmc = StudyConfig {
            engine: Engine::Mcmc,
            analyses: vec![Analysis::MarginalMagnitude],
            ..cfg
        };
        let (_, draws) = calibrate_dataset(&data, &mcmc).unwrap();
        assert_eq!(draws.len(), 1);
    }
}
