//! report.json, summary.csv, draws.csv and the stdout summary table.

use std::fs;
use std::path::{Path, PathBuf};

use l2cal::posterior::PosteriorSample;
use l2cal::simharness::{
    summary_csv, table1_csv, Analysis, CalibrationReport, Prepared, SimulationReport,
    SmootherReport, Table1Report,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub n: usize,
    pub smoother: SmootherReport,
    pub theta_hat: Vec<f64>,
    pub loss_value: f64,
    pub converged: bool,
    pub interior: bool,
    pub theta_l2: Vec<f64>,
    pub flags: Vec<String>,
}

impl FitReport {
    pub fn new(prep: &Prepared, theta_l2: Vec<f64>) -> Self {
        Self {
            n: prep.fit.data().n(),
            smoother: SmootherReport::from_fit(&prep.fit),
            theta_hat: prep.estimate.theta_hat.clone(),
            loss_value: prep.estimate.loss_value,
            converged: prep.estimate.converged,
            interior: prep.estimate.interior,
            theta_l2,
            flags: prep.flags.clone(),
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: u32,
    command: crate::config::Command,
    config: serde_json::Value,
    result: &'a T,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    Ok(cfg.out.join(name))
}

fn write_report<T: Serialize>(cfg: &RunConfig, result: &T) -> Result<(), CliError> {
    let env = Envelope {
        schema: SCHEMA_VERSION,
        command: cfg.command,
        config: cfg.recorded(),
        result,
    };
    let mut text = serde_json::to_string_pretty(&env).expect("report serializes");
    text.push('\n');
    write_file(&out_path(cfg, "report.json")?, text.as_bytes())
}

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv output is utf-8")
}

/// Writes a line to stdout; a closed pipe is not an error.
pub fn stdout_line(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

/// Prints rows as an aligned table on stdout.
fn print_table(header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        stdout_line(&parts.join("  "));
    };
    line(header.to_vec());
    for r in rows {
        line(r.iter().map(String::as_str).collect());
    }
}

fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .expect("own csv")
        .iter()
        .map(String::from)
        .collect();
    let rows = rdr
        .records()
        .map(|r| r.expect("own csv").iter().map(String::from).collect())
        .collect();
    (header, rows)
}

pub fn write_fit(cfg: &RunConfig, r: &FitReport) -> Result<(), CliError> {
    write_report(cfg, r)?;
    let header = [
        "coordinate",
        "theta_hat",
        "theta_l2",
        "lambda",
        "sigma2",
        "converged",
    ];
    let rows: Vec<Vec<String>> = r
        .theta_hat
        .iter()
        .enumerate()
        .map(|(j, t)| {
            vec![
                (j + 1).to_string(),
                format!("{t:.6}"),
                format!("{:.6}", r.theta_l2[j]),
                format!("{:.3e}", r.smoother.lambda),
                format!("{:.6}", r.smoother.sigma2),
                r.converged.to_string(),
            ]
        })
        .collect();
    write_file(
        &out_path(cfg, "summary.csv")?,
        csv_string(&header, &rows).as_bytes(),
    )?;
    print_table(&header, &rows);
    Ok(())
}

pub fn write_calibration(
    cfg: &RunConfig,
    r: &CalibrationReport,
    draws: &[(Analysis, PosteriorSample)],
) -> Result<(), CliError> {
    write_report(cfg, r)?;
    let header = [
        "analysis",
        "coordinate",
        "theta_hat",
        "post_mean",
        "post_sd",
        "lower",
        "upper",
        "gamma",
    ];
    let mut rows = Vec::new();
    for a in r.analyses.iter().filter(|a| a.completed()) {
        let gamma = a
            .scaling
            .as_ref()
            .and_then(|s| s.gamma)
            .map_or(String::new(), |g| format!("{g:.4}"));
        for j in 0..a.post_mean.len() {
            rows.push(vec![
                a.analysis.to_string(),
                (j + 1).to_string(),
                format!("{:.6}", r.theta_hat[j]),
                format!("{:.6}", a.post_mean[j]),
                format!("{:.6}", a.post_sd[j]),
                format!("{:.6}", a.intervals[j].lower),
                format!("{:.6}", a.intervals[j].upper),
                gamma.clone(),
            ]);
        }
    }
    write_file(
        &out_path(cfg, "summary.csv")?,
        csv_string(&header, &rows).as_bytes(),
    )?;
    if cfg.draws {
        for (a, s) in draws {
            let name = if draws.len() == 1 {
                "draws.csv".to_string()
            } else {
                format!("draws-{a}.csv")
            };
            let path = out_path(cfg, &name)?;
            let file = fs::File::create(&path).map_err(io_err(&path))?;
            s.write_csv(file).map_err(|e| CliError::Io {
                path: path.clone(),
                source: std::io::Error::other(e),
            })?;
        }
    }
    print_table(&header, &rows);
    Ok(())
}

pub fn write_simulation(cfg: &RunConfig, r: &SimulationReport) -> Result<(), CliError> {
    write_report(cfg, r)?;
    let text = summary_csv(r).map_err(CliError::Run)?;
    write_file(&out_path(cfg, "summary.csv")?, text.as_bytes())?;
    let (header, rows) = csv_rows(&text);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    print_table(&header, &rows);
    Ok(())
}

pub fn write_table1(cfg: &RunConfig, r: &Table1Report) -> Result<(), CliError> {
    write_report(cfg, r)?;
    let text = table1_csv(r).map_err(CliError::Run)?;
    write_file(&out_path(cfg, "summary.csv")?, text.as_bytes())?;
    let (header, rows) = csv_rows(&text);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    print_table(&header, &rows);
    Ok(())
}
