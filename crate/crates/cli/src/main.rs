//! `l2cal` command-line front end.

mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use l2cal::models::lookup_scenario;
use l2cal::numerics::build_rule;
use l2cal::simharness::{
    calibrate_dataset, generate_replicate_with, prepare, run_study, run_table1, theta_l2,
    Sigma2Source,
};
use l2cal::smoother::Dataset;

use config::{load_config_file, Command, Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Run(l2cal::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } => 3,
            Self::Run(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "l2cal",
    version,
    about = "Bayesian L2 calibration of inexact computer models"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Smooth one dataset and estimate theta
    Fit(Opts),
    /// Full calibration of one dataset: sandwiches, scalings, posteriors, intervals
    Calibrate(Opts),
    /// Monte-Carlo coverage study
    Simulate(Opts),
    /// Conjugate coverage table for the linear model
    Table1(Opts),
}

#[derive(clap::Args)]
struct Opts {
    #[command(flatten)]
    overrides: Overrides,
    /// Print the resolved configuration as JSON and exit
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, opts) = match cli.command {
        Cmd::Fit(o) => (Command::Fit, o),
        Cmd::Calibrate(o) => (Command::Calibrate, o),
        Cmd::Simulate(o) => (Command::Simulate, o),
        Cmd::Table1(o) => (Command::Table1, o),
    };
    match run(command, opts) {
        Ok(warnings) => {
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            ExitCode::from(u8::from(!warnings.is_empty()))
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn resolve(command: Command, opts: &Opts) -> Result<RunConfig, CliError> {
    let file = match &opts.overrides.config {
        Some(p) => load_config_file(p)?,
        None => Overrides::default(),
    };
    RunConfig::resolve(command, file.merge(opts.overrides.clone()))
}

/// Runs the command; returns the warnings of a completed run.
fn run(command: Command, opts: Opts) -> Result<Vec<String>, CliError> {
    let cfg = resolve(command, &opts)?;
    if opts.print_config {
        output::stdout_line(&serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(vec![]);
    }
    match command {
        Command::Fit => fit(&cfg),
        Command::Calibrate => calibrate(&cfg),
        Command::Simulate => simulate(&cfg),
        Command::Table1 => table1(&cfg),
    }
}

fn dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.data {
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|e| CliError::Io {
                path: path.clone(),
                source: e,
            })?;
            Dataset::from_csv_reader(file)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
        None => {
            let (model, system) =
                lookup_scenario(&cfg.scenario).map_err(|e| CliError::Config(e.to_string()))?;
            let n = cfg.n.unwrap_or(system.default_n());
            generate_replicate_with(&system, n, model.x_box(), cfg.seed, cfg.design_endpoints)
                .map_err(CliError::Run)
        }
    }
}

fn known_sigma2(cfg: &RunConfig) -> Result<Option<f64>, CliError> {
    Ok(match cfg.sigma2 {
        Sigma2Source::Known => {
            let (_, system) =
                lookup_scenario(&cfg.scenario).map_err(|e| CliError::Config(e.to_string()))?;
            Some(system.sigma().powi(2))
        }
        Sigma2Source::Estimated => None,
    })
}

fn fit(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let data = dataset(cfg)?;
    let study = cfg.study();
    let (model, system) =
        lookup_scenario(&cfg.scenario).map_err(|e| CliError::Config(e.to_string()))?;
    let rule = build_rule(model.x_box(), cfg.quad_order).map_err(CliError::Run)?;
    let prep = prepare(&data, &model, &rule, &study, known_sigma2(cfg)?, cfg.seed).map_err(
        |e| match e {
            l2cal::Error::Domain { .. } | l2cal::Error::SampleSize { .. } => {
                CliError::Config(e.to_string())
            }
            e => CliError::Run(e),
        },
    )?;
    let truth = theta_l2(&model, &system, cfg.quad_order).map_err(CliError::Run)?;
    let report = output::FitReport::new(&prep, truth);
    output::write_fit(cfg, &report)?;
    Ok(prep.flags.clone())
}

fn calibrate(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let data = dataset(cfg)?;
    let (report, draws) = calibrate_dataset(&data, &cfg.study()).map_err(|e| match e {
        l2cal::Error::Domain { .. } | l2cal::Error::SampleSize { .. } => {
            CliError::Config(e.to_string())
        }
        e => CliError::Run(e),
    })?;
    output::write_calibration(cfg, &report, &draws)?;
    let mut warnings = report.flags.clone();
    for a in &report.analyses {
        if let Some(e) = &a.error {
            warnings.push(format!("{}: {e}", a.analysis));
        }
        warnings.extend(a.flags.iter().map(|f| format!("{}: {f}", a.analysis)));
    }
    Ok(warnings)
}

fn simulate(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let report = run_study(&cfg.study(), cfg.workers).map_err(CliError::Run)?;
    output::write_simulation(cfg, &report)?;
    Ok(report.warnings())
}

fn table1(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let report = run_table1(&cfg.table1(), cfg.workers).map_err(CliError::Run)?;
    output::write_table1(cfg, &report)?;
    Ok(report
        .rows
        .iter()
        .filter(|r| r.failed > 0)
        .map(|r| format!("n={} {}: {} replicates failed", r.n, r.gamma, r.failed))
        .collect())
}
