//! Run configuration: JSON file, command-line flags, and the merged result.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use l2cal::posterior::IntervalMode;
use l2cal::simharness::{Analysis, Engine, PriorSpec, Sigma2Source, StudyConfig, Table1Config};
use l2cal::smoother::{KernelFamily, SigmaEstimator};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Fit,
    Calibrate,
    Simulate,
    Table1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    Magnitude,
    Curvature,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Marginal,
    Conditional,
    Both,
}

fn parse_engine(s: &str) -> Result<Engine, String> {
    s.parse().map_err(|e: l2cal::Error| e.to_string())
}

fn parse_interval(s: &str) -> Result<IntervalMode, String> {
    s.parse().map_err(|e: l2cal::Error| e.to_string())
}

fn parse_kernel(s: &str) -> Result<KernelFamily, String> {
    s.parse().map_err(|e: l2cal::Error| e.to_string())
}

fn parse_sigma_estimator(s: &str) -> Result<SigmaEstimator, String> {
    s.parse().map_err(|e: l2cal::Error| e.to_string())
}

fn parse_sigma2(s: &str) -> Result<Sigma2Source, String> {
    match s {
        "estimated" => Ok(Sigma2Source::Estimated),
        "known" => Ok(Sigma2Source::Known),
        other => Err(format!("expected `estimated` or `known`, got `{other}`")),
    }
}

/// Values that may come from a config file or from flags. Every field is
/// optional; flags win over the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// JSON config file; its keys mirror these flags (snake_case)
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    #[serde(default)]
    #[arg(skip)]
    pub command: Option<Command>,

    /// scenario1, scenario2, scenario3 or simple-linear
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Sample size (table1: a single sample size instead of 4 and 8)
    #[arg(long)]
    pub n: Option<usize>,
    /// Gauss-Legendre points per input dimension
    #[arg(long)]
    pub quad_order: Option<usize>,
    #[arg(long, value_enum)]
    pub scaling: Option<Scaling>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    /// mcmc, laplace or conjugate
    #[arg(long, value_parser = parse_engine)]
    pub engine: Option<Engine>,
    /// quantile or hpd
    #[arg(long, value_parser = parse_interval)]
    pub interval: Option<IntervalMode>,
    /// Credible level in (0,1)
    #[arg(long)]
    pub level: Option<f64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for replicates (default: all cores)
    #[arg(long)]
    pub workers: Option<usize>,
    /// Dataset CSV with header x1..xk,y (fit, calibrate); simulated from the scenario when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Write posterior draws (mcmc engine)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub draws: Option<bool>,
    /// estimated or known
    #[arg(long, value_parser = parse_sigma2)]
    pub sigma2: Option<Sigma2Source>,
    /// Prior variance of a zero-mean normal prior; uniform over the parameter box when absent
    #[arg(long)]
    pub tau2: Option<f64>,
    /// gaussian or matern-5/2
    #[arg(long, value_parser = parse_kernel)]
    pub kernel: Option<KernelFamily>,
    /// gcv or residual-df
    #[arg(long, value_parser = parse_sigma_estimator)]
    pub sigma_estimator: Option<SigmaEstimator>,
    /// Replicates rerun with MCMC under the laplace engine
    #[arg(long)]
    pub spot_check: Option<usize>,
    /// MCMC iterations per chain
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    /// Equidistant designs include both endpoints (false: cell midpoints)
    #[arg(long)]
    pub design_endpoints: Option<bool>,
}

impl Overrides {
    /// Fields set in `other` replace those in `self`.
    pub fn merge(self, other: Overrides) -> Overrides {
        macro_rules! pick {
            ($($f:ident),*) => { Overrides { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            config,
            command,
            scenario,
            seed,
            replicates,
            n,
            quad_order,
            scaling,
            variant,
            engine,
            interval,
            level,
            out,
            workers,
            data,
            draws,
            sigma2,
            tau2,
            kernel,
            sigma_estimator,
            spot_check,
            iterations,
            chains,
            design_endpoints
        )
    }
}

/// Parses a config file, rejecting unknown keys and reporting the offending
/// key path.
pub fn parse_config_str(text: &str) -> Result<Overrides, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("config key `{path}`: {}", e.inner()))
    })
}

pub fn load_config_file(path: &Path) -> Result<Overrides, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_config_str(&text)
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub scenario: String,
    pub seed: u64,
    pub replicates: usize,
    pub n: Option<usize>,
    pub quad_order: usize,
    pub scaling: Scaling,
    pub variant: Variant,
    pub engine: Engine,
    pub interval: IntervalMode,
    pub level: f64,
    pub out: PathBuf,
    pub workers: Option<usize>,
    pub data: Option<PathBuf>,
    pub draws: bool,
    pub sigma2: Sigma2Source,
    pub tau2: Option<f64>,
    pub kernel: KernelFamily,
    pub sigma_estimator: SigmaEstimator,
    pub spot_check: usize,
    pub iterations: usize,
    pub chains: usize,
    pub design_endpoints: bool,
}

impl RunConfig {
    /// Applies per-command defaults and validates.
    pub fn resolve(command: Command, o: Overrides) -> Result<Self, CliError> {
        let study = StudyConfig::default();
        let table1 = command == Command::Table1;
        let cfg = RunConfig {
            command,
            scenario: o.scenario.unwrap_or_else(|| {
                if table1 {
                    "simple-linear".into()
                } else {
                    study.scenario.clone()
                }
            }),
            seed: o.seed.unwrap_or(study.seed),
            replicates: o.replicates.unwrap_or(if table1 {
                Table1Config::default().replicates
            } else {
                study.replicates
            }),
            n: o.n,
            quad_order: o.quad_order.unwrap_or(study.quad_order),
            scaling: o.scaling.unwrap_or(Scaling::Both),
            variant: o.variant.unwrap_or(Variant::Both),
            engine: o.engine.unwrap_or(if table1 {
                Engine::Conjugate
            } else {
                study.engine
            }),
            interval: o.interval.unwrap_or(if table1 {
                IntervalMode::Hpd
            } else {
                study.interval
            }),
            level: o.level.unwrap_or(study.level),
            out: o.out.unwrap_or_else(|| PathBuf::from(".")),
            workers: o.workers,
            data: o.data,
            draws: o.draws.unwrap_or(false),
            sigma2: o.sigma2.unwrap_or(if table1 {
                Sigma2Source::Known
            } else {
                study.sigma2
            }),
            tau2: o.tau2,
            kernel: o.kernel.unwrap_or(study.kernel),
            sigma_estimator: o.sigma_estimator.unwrap_or(study.sigma_estimator),
            spot_check: o.spot_check.unwrap_or(if command == Command::Simulate {
                study.mcmc_spot_check
            } else {
                0
            }),
            iterations: o.iterations.unwrap_or(study.sampler.iterations),
            chains: o.chains.unwrap_or(study.sampler.chains),
            design_endpoints: o.design_endpoints.unwrap_or(true),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level must be in (0,1), got {}", self.level));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        if self.command == Command::Table1 {
            if self.scenario != "simple-linear" {
                return bad("table1 runs only on the simple-linear scenario".into());
            }
            if self.engine != Engine::Conjugate {
                return bad("table1 uses the conjugate engine".into());
            }
            if matches!(self.n, Some(n) if n < 3) {
                return bad("n must be at least 3".into());
            }
            if let Some(t) = self.tau2 {
                if !(t > 0.0 && t.is_finite()) {
                    return bad(format!("tau2 must be positive, got {t}"));
                }
            }
            return Ok(());
        }
        if self.data.is_some() && self.command == Command::Simulate {
            return bad("simulate generates its own data; drop `data`".into());
        }
        self.study()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn analyses(&self) -> Vec<Analysis> {
        let marg = matches!(self.variant, Variant::Marginal | Variant::Both);
        let cond = matches!(self.variant, Variant::Conditional | Variant::Both);
        let mag = matches!(self.scaling, Scaling::Magnitude | Scaling::Both);
        let curv = matches!(self.scaling, Scaling::Curvature | Scaling::Both);
        let mut out = Vec::new();
        if marg && mag {
            out.push(Analysis::MarginalMagnitude);
        }
        if marg && curv {
            out.push(Analysis::MarginalCurvature);
        }
        if cond && mag {
            out.push(Analysis::ConditionalMagnitude);
        }
        if cond && curv {
            out.push(Analysis::ConditionalCurvature);
        }
        out
    }

    pub fn study(&self) -> StudyConfig {
        let d = StudyConfig::default();
        StudyConfig {
            scenario: self.scenario.clone(),
            replicates: self.replicates,
            n: self.n,
            seed: self.seed,
            analyses: self.analyses(),
            interval: self.interval,
            level: self.level,
            engine: self.engine,
            quad_order: self.quad_order,
            kernel: self.kernel,
            sigma_estimator: self.sigma_estimator,
            sigma2: self.sigma2,
            prior: self.tau2.map(|tau2| PriorSpec::Normal { tau2 }),
            sampler: l2cal::posterior::SamplerConfig {
                iterations: self.iterations,
                chains: self.chains,
                ..d.sampler
            },
            mcmc_spot_check: self.spot_check,
            design_endpoints: self.design_endpoints,
            ..d
        }
    }

    pub fn table1(&self) -> Table1Config {
        let d = Table1Config::default();
        Table1Config {
            sample_sizes: self.n.map_or(d.sample_sizes.clone(), |n| vec![n]),
            replicates: self.replicates,
            seed: self.seed,
            tau2: self.tau2.unwrap_or(d.tau2),
            level: self.level,
            interval: self.interval,
            sigma2: self.sigma2,
            quad_order: self.quad_order,
            design_endpoints: self.design_endpoints,
            ..d
        }
    }

    /// The configuration as recorded in reports: output location and worker
    /// count are left out so that reports do not depend on them.
    pub fn recorded(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out");
            m.remove("workers");
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let err = parse_config_str(r#"{"scenario": "scenario2", "replicats": 3}"#).unwrap_err();
        assert!(err.to_string().contains("replicats"), "{err}");
    }

    #[test]
    fn bad_type_names_the_key() {
        let err = parse_config_str(r#"{"replicates": "many"}"#).unwrap_err();
        assert!(err.to_string().contains("`replicates`"), "{err}");
    }

    #[test]
    fn flags_win_over_file() {
        let file = parse_config_str(r#"{"seed": 3, "replicates": 10}"#).unwrap();
        let flags = Overrides {
            seed: Some(9),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(Command::Simulate, file.merge(flags)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.replicates, 10);
    }

    #[test]
    fn resolved_config_reloads() {
        let o = Overrides {
            scenario: Some("scenario3".into()),
            level: Some(0.9),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(Command::Calibrate, o).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let again =
            RunConfig::resolve(Command::Calibrate, parse_config_str(&text).unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn invariants_are_checked() {
        let level = Overrides {
            level: Some(1.5),
            ..Default::default()
        };
        let err = RunConfig::resolve(Command::Simulate, level).unwrap_err();
        assert!(err.to_string().contains("level must be in (0,1)"));
        let zero = Overrides {
            replicates: Some(0),
            ..Default::default()
        };
        assert!(RunConfig::resolve(Command::Simulate, zero).is_err());
        let conj = Overrides {
            engine: Some(Engine::Conjugate),
            ..Default::default()
        };
        assert!(RunConfig::resolve(Command::Simulate, conj).is_err());
        let t1 = Overrides {
            engine: Some(Engine::Mcmc),
            ..Default::default()
        };
        assert!(RunConfig::resolve(Command::Table1, t1).is_err());
    }

    #[test]
    fn analyses_follow_scaling_and_variant() {
        let o = Overrides {
            scaling: Some(Scaling::Curvature),
            variant: Some(Variant::Conditional),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(Command::Simulate, o).unwrap();
        assert_eq!(cfg.analyses(), vec![Analysis::ConditionalCurvature]);
        let all = RunConfig::resolve(Command::Simulate, Overrides::default()).unwrap();
        assert_eq!(all.analyses(), Analysis::SCALED.to_vec());
    }

    #[test]
    fn recorded_config_omits_out_and_workers() {
        let o = Overrides {
            workers: Some(3),
            out: Some("x".into()),
            ..Default::default()
        };
        let v = RunConfig::resolve(Command::Simulate, o).unwrap().recorded();
        assert!(v.get("workers").is_none() && v.get("out").is_none());
        assert!(v.get("seed").is_some());
    }
}
