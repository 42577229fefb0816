//! Kernel ridge regression μ̂(x) = Σ uᵢ κ(x, xᵢ; ρ), u = (K + λI)⁻¹ y, with
//! (λ, ρ) chosen by generalized cross-validation over a grid.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::DomainBox;
use crate::numerics::QuadratureRule;

/// Diagonal jitter added to every Gram matrix.
pub const GRAM_JITTER: f64 = 1e-10;

/// Observed design points and responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    design: Vec<Vec<f64>>,
    responses: DVector<f64>,
}

impl Dataset {
    pub fn new(design: Vec<Vec<f64>>, responses: Vec<f64>) -> Result<Self> {
        let n = design.len();
        if n == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        if responses.len() != n {
            return Err(Error::Data(format!(
                "{n} design rows but {} responses",
                responses.len()
            )));
        }
        let k = design[0].len();
        if k == 0 {
            return Err(Error::Data("design rows have no inputs".into()));
        }
        for (i, row) in design.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Data(format!(
                    "row {i} has {} inputs, expected {k}",
                    row.len()
                )));
            }
            if row
                .iter()
                .chain(std::iter::once(&responses[i]))
                .any(|v| !v.is_finite())
            {
                return Err(Error::Data(format!("row {i} contains a non-finite value")));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let d = design[i]
                    .iter()
                    .zip(&design[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if d <= 1e-12 {
                    return Err(Error::Data(format!("design rows {i} and {j} coincide")));
                }
            }
        }
        Ok(Self {
            design,
            responses: DVector::from_vec(responses),
        })
    }

    /// One-input dataset from paired slices.
    pub fn from_1d(x: &[f64], y: &[f64]) -> Result<Self> {
        Self::new(x.iter().map(|&v| vec![v]).collect(), y.to_vec())
    }

    pub fn n(&self) -> usize {
        self.design.len()
    }

    pub fn k(&self) -> usize {
        self.design[0].len()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.design[i]
    }

    pub fn design(&self) -> &[Vec<f64>] {
        &self.design
    }

    pub fn responses(&self) -> &DVector<f64> {
        &self.responses
    }

    /// Same design with new responses.
    pub fn with_responses(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(
                "replacement responses must be finite and match n".into(),
            ));
        }
        Ok(Self {
            design: self.design.clone(),
            responses: y,
        })
    }

    pub fn check_in_box(&self, domain: &DomainBox) -> Result<()> {
        for row in &self.design {
            domain.check(row, "design point")?;
        }
        Ok(())
    }

    /// Reads `x1..xk,y` columns with a header row.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let cols = headers.len();
        if cols < 2 {
            return Err(Error::Data(
                "CSV needs at least one x column and a y column".into(),
            ));
        }
        for (j, h) in headers.iter().enumerate() {
            let expected = if j + 1 == cols {
                "y".to_string()
            } else {
                format!("x{}", j + 1)
            };
            if h.trim() != expected {
                return Err(Error::Data(format!(
                    "CSV column {j} is `{h}`, expected `{expected}`"
                )));
            }
        }
        let mut design = Vec::new();
        let mut responses = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let values = record
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Data(format!("CSV record {}: {e}", line + 1)))?;
            responses.push(values[cols - 1]);
            design.push(values[..cols - 1].to_vec());
        }
        Self::new(design, responses)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.k()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for (row, y) in self.design.iter().zip(self.responses.iter()) {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{y:?}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    #[serde(rename = "gaussian")]
    Gaussian,
    #[serde(rename = "matern-5/2")]
    Matern52,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "matern-5/2" | "matern52" => Ok(Self::Matern52),
            other => Err(Error::Parameter(format!(
                "unknown kernel family `{other}` (expected gaussian or matern-5/2)"
            ))),
        }
    }
}

/// Correlation function with per-input length-scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub rho: Vec<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, rho: Vec<f64>) -> Result<Self> {
        if rho.is_empty() || rho.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Parameter(format!(
                "length-scales must be positive, got {rho:?}"
            )));
        }
        Ok(Self { family, rho })
    }

    pub fn gaussian(rho: f64) -> Self {
        Self {
            family: KernelFamily::Gaussian,
            rho: vec![rho],
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> f64 {
        let r2: f64 = x
            .iter()
            .zip(x2)
            .zip(&self.rho)
            .map(|((a, b), r)| ((a - b) / r).powi(2))
            .sum();
        match self.family {
            KernelFamily::Gaussian => (-r2).exp(),
            KernelFamily::Matern52 => {
                let s = (5.0 * r2).sqrt();
                (1.0 + s + s * s / 3.0) * (-s).exp()
            }
        }
    }
}

/// κ(x, x2; ρ).
pub fn kernel_eval(kernel: &KernelSpec, x: &[f64], x2: &[f64]) -> f64 {
    kernel.eval(x, x2)
}

/// How σ² is estimated from a fitted smoother.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaEstimator {
    /// The minimized GCV criterion n‖(I−A)y‖² / tr(I−A)².
    Gcv,
    /// Residual sum of squares over residual degrees of freedom,
    /// ‖(I−A)y‖² / (n − tr A).
    ResidualDf,
}

impl std::str::FromStr for SigmaEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcv" => Ok(Self::Gcv),
            "residual-df" => Ok(Self::ResidualDf),
            other => Err(Error::Parameter(format!(
                "unknown sigma estimator `{other}` (expected gcv or residual-df)"
            ))),
        }
    }
}

/// 19 log-spaced values from 1e-8 to 1e1.
pub fn default_lambda_grid() -> Vec<f64> {
    log_space(1e-8, 1e1, 19)
}

/// 13 log-spaced multipliers of the design range, 0.05 to 2.
pub fn default_rho_factors() -> Vec<f64> {
    log_space(0.05, 2.0, 13)
}

pub fn log_space(a: f64, b: f64, m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![a];
    }
    let (la, lb) = (a.log10(), b.log10());
    (0..m)
        .map(|i| 10f64.powf(la + (lb - la) * i as f64 / (m - 1) as f64))
        .collect()
}

/// Length-scale grid: each multiplier times the per-input design range.
pub fn rho_grid_from_factors(data: &Dataset, factors: &[f64]) -> Vec<Vec<f64>> {
    let ranges: Vec<f64> = (0..data.k())
        .map(|j| {
            let (lo, hi) = data
                .design()
                .iter()
                .map(|r| r[j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                    (a.min(v), b.max(v))
                });
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        })
        .collect();
    factors
        .iter()
        .map(|f| ranges.iter().map(|r| r * f).collect())
        .collect()
}

/// Grid and estimator settings for [`fit_smoother`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmootherConfig {
    pub family: KernelFamily,
    pub lambda_grid: Vec<f64>,
    /// Explicit length-scale vectors; when `None` they come from
    /// `rho_factors` times the design range.
    pub rho_grid: Option<Vec<Vec<f64>>>,
    pub rho_factors: Vec<f64>,
    pub sigma: SigmaEstimator,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            family: KernelFamily::Gaussian,
            lambda_grid: default_lambda_grid(),
            rho_grid: None,
            rho_factors: default_rho_factors(),
            sigma: SigmaEstimator::Gcv,
        }
    }
}

fn gram(data: &Dataset, kernel: &KernelSpec) -> DMatrix<f64> {
    let n = data.n();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0 + GRAM_JITTER;
        for j in 0..i {
            let v = kernel.eval(data.x(i), data.x(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Eigendecomposition of the Gram matrix, reused across the λ grid.
struct SpectralGram {
    eigenvalues: DVector<f64>,
    /// Qᵀ y
    rotated: DVector<f64>,
}

impl SpectralGram {
    fn new(data: &Dataset, kernel: &KernelSpec) -> Self {
        let eig = SymmetricEigen::new(gram(data, kernel));
        let rotated = eig.eigenvectors.transpose() * data.responses();
        Self {
            eigenvalues: eig.eigenvalues.map(|v| v.max(0.0)),
            rotated,
        }
    }

    /// (‖(I−A)y‖², tr(I−A)).
    fn residual(&self, lambda: f64) -> (f64, f64) {
        let mut rss = 0.0;
        let mut tr = 0.0;
        for (ev, qy) in self.eigenvalues.iter().zip(self.rotated.iter()) {
            let s = lambda / (ev + lambda);
            rss += (s * qy).powi(2);
            tr += s;
        }
        (rss, tr)
    }

    fn gcv(&self, lambda: f64) -> Result<(f64, f64, f64)> {
        let (rss, tr) = self.residual(lambda);
        if !(tr > 1e-10) {
            return Err(Error::DegenerateSmoother(tr));
        }
        let n = self.eigenvalues.len() as f64;
        Ok((n * rss / (tr * tr), rss, tr))
    }
}

/// GCV criterion n‖(I−A)y‖² / tr(I−A)² for A = K(K+λI)⁻¹.
pub fn gcv_score(data: &Dataset, kernel: &KernelSpec, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    SpectralGram::new(data, kernel).gcv(lambda).map(|r| r.0)
}

/// A fitted kernel ridge regressor.
#[derive(Debug, Clone)]
pub struct SmootherFit {
    data: Dataset,
    kernel: KernelSpec,
    lambda: f64,
    u: DVector<f64>,
    sigma2_hat: f64,
    smoother_trace: f64,
    gcv: Option<f64>,
    chol: Cholesky<f64, Dyn>,
}

fn candidate_order(a: &(f64, f64, &[f64]), b: &(f64, f64, &[f64])) -> Ordering {
    a.0.total_cmp(&b.0)
        .then_with(|| b.1.total_cmp(&a.1))
        .then_with(|| {
            a.2.iter()
                .zip(b.2)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
}

/// Selects (λ, ρ) minimizing GCV over the grid and fits the smoother.
/// Exact ties go to the larger λ, then the smaller ρ.
pub fn fit_smoother(data: &Dataset, config: &SmootherConfig) -> Result<SmootherFit> {
    if data.n() < 3 {
        return Err(Error::Fit(format!(
            "GCV selection needs n >= 3, got {}",
            data.n()
        )));
    }
    if config.lambda_grid.is_empty() {
        return Err(Error::Fit("empty lambda grid".into()));
    }
    let rho_grid = match &config.rho_grid {
        Some(g) => g.clone(),
        None => rho_grid_from_factors(data, &config.rho_factors),
    };
    if rho_grid.is_empty() {
        return Err(Error::Fit("empty rho grid".into()));
    }
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for rho in &rho_grid {
        let kernel = KernelSpec::new(config.family, rho.clone())?;
        if rho.len() != data.k() {
            return Err(Error::Fit(format!(
                "rho has {} entries, data has k = {}",
                rho.len(),
                data.k()
            )));
        }
        let spectral = SpectralGram::new(data, &kernel);
        for &lambda in &config.lambda_grid {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::Fit(format!("invalid lambda {lambda} in grid")));
            }
            let Ok((score, _, _)) = spectral.gcv(lambda) else {
                continue;
            };
            if !score.is_finite() {
                continue;
            }
            let replace = match &best {
                None => true,
                Some((bs, bl, br)) => {
                    candidate_order(&(score, lambda, rho), &(*bs, *bl, br)) == Ordering::Less
                }
            };
            if replace {
                best = Some((score, lambda, rho.clone()));
            }
        }
    }
    let (_, lambda, rho) =
        best.ok_or_else(|| Error::Fit("every grid point gave a degenerate smoother".into()))?;
    fit_fixed(
        data,
        KernelSpec::new(config.family, rho)?,
        lambda,
        config.sigma,
    )
}

/// Fits the smoother at fixed (λ, ρ).
pub fn fit_fixed(
    data: &Dataset,
    kernel: KernelSpec,
    lambda: f64,
    sigma: SigmaEstimator,
) -> Result<SmootherFit> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    if kernel.rho.len() != data.k() {
        return Err(Error::Fit("kernel dimension does not match data".into()));
    }
    let n = data.n();
    let k = gram(data, &kernel);
    let mut phi = k.clone();
    for i in 0..n {
        phi[(i, i)] += lambda;
    }
    let chol = phi
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Fit("K + λI is not positive definite".into()))?;
    let y = data.responses();
    let mut u = chol.solve(y);
    // one step of iterative refinement
    let r = y - &phi * &u;
    u += chol.solve(&r);
    let resid = (y - &phi * &u).amax();
    if resid > 1e-8 * y.amax().max(f64::MIN_POSITIVE) && resid > 1e-300 {
        return Err(Error::Fit(format!(
            "linear solve residual {resid:e} too large"
        )));
    }

    let spectral = SpectralGram::new(data, &kernel);
    let (rss, tr_resid) = spectral.residual(lambda);
    let smoother_trace = n as f64 - tr_resid;
    let gcv = spectral.gcv(lambda).ok().map(|g| g.0);
    let sigma2_hat = match sigma {
        SigmaEstimator::Gcv => gcv.unwrap_or(0.0),
        SigmaEstimator::ResidualDf => {
            if tr_resid > 1e-10 {
                rss / tr_resid
            } else {
                0.0
            }
        }
    };
    Ok(SmootherFit {
        data: data.clone(),
        kernel,
        lambda,
        u,
        sigma2_hat: sigma2_hat.max(0.0),
        smoother_trace,
        gcv,
        chol,
    })
}

impl SmootherFit {
    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Representer coefficients u.
    pub fn coefficients(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn sigma2_hat(&self) -> f64 {
        self.sigma2_hat
    }

    /// tr A.
    pub fn smoother_trace(&self) -> f64 {
        self.smoother_trace
    }

    /// GCV criterion at the fitted (λ, ρ), when defined.
    pub fn gcv(&self) -> Option<f64> {
        self.gcv
    }

    /// Same fit with σ² replaced, e.g. by a known value.
    pub fn with_sigma2(mut self, sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::Parameter(format!(
                "sigma2 must be nonnegative, got {sigma2}"
            )));
        }
        self.sigma2_hat = sigma2;
        Ok(self)
    }

    /// Replaces the coefficients; used to represent a known function in the
    /// span of the kernel sections.
    pub fn with_coefficients(mut self, u: DVector<f64>) -> Result<Self> {
        if u.len() != self.data.n() {
            return Err(Error::Parameter("coefficient length must equal n".into()));
        }
        self.u = u;
        Ok(self)
    }

    /// Refit with new responses on the same design at the same (λ, ρ).
    pub fn refit(&self, y: DVector<f64>, sigma: SigmaEstimator) -> Result<Self> {
        fit_fixed(
            &self.data.with_responses(y)?,
            self.kernel.clone(),
            self.lambda,
            sigma,
        )
    }

    /// k(x) = (κ(x, x₁), …, κ(x, xₙ))ᵀ.
    pub fn kernel_vector(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.data.n(),
            self.data.design().iter().map(|xi| self.kernel.eval(x, xi)),
        )
    }

    /// μ̂(x) = Σ uᵢ κ(x, xᵢ).
    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        self.data
            .design()
            .iter()
            .zip(self.u.iter())
            .map(|(xi, ui)| ui * self.kernel.eval(x, xi))
            .sum()
    }

    /// g(x) = (K + λI)⁻¹ k(x), so that μ̂(x) = g(x)ᵀ y.
    pub fn smoother_weights(&self, x: &[f64]) -> DVector<f64> {
        self.chol.solve(&self.kernel_vector(x))
    }

    /// Columns g(xⱼ) for every node of `rule` (n × m).
    pub fn weights_at_nodes(&self, rule: &QuadratureRule) -> DMatrix<f64> {
        let n = self.data.n();
        let mut kq = DMatrix::zeros(n, rule.len());
        for (j, (x, _)) in rule.iter().enumerate() {
            for i in 0..n {
                kq[(i, j)] = self.kernel.eval(x, self.data.x(i));
            }
        }
        self.chol.solve(&kq)
    }

    /// μ̂ at every node of `rule`.
    pub fn predict_at_nodes(&self, rule: &QuadratureRule) -> Vec<f64> {
        rule.iter().map(|(x, _)| self.predict_mean(x)).collect()
    }

    /// (K + λI)⁻¹ v.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn line_data(n: usize) -> Dataset {
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 0.5).collect();
        Dataset::from_1d(&x, &y).unwrap()
    }

    fn noisy_simple_linear(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                4.0 * v + v * (5.0 * v).sin() + 0.25 * e
            })
            .collect();
        Dataset::from_1d(&x, &y).unwrap()
    }

    #[test]
    fn kernel_values() {
        let k = KernelSpec::gaussian(0.3);
        assert_eq!(k.eval(&[0.4], &[0.4]), 1.0);
        assert!((k.eval(&[0.1], &[0.4]) - (-1f64).exp()).abs() < 1e-15);
        let m = KernelSpec::new(KernelFamily::Matern52, vec![0.5, 1.0]).unwrap();
        assert_eq!(m.eval(&[0.2, 0.3], &[0.2, 0.3]), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a: Vec<f64> = (0..2).map(|_| rand::Rng::random(&mut rng)).collect();
            let b: Vec<f64> = (0..2).map(|_| rand::Rng::random(&mut rng)).collect();
            let v = m.eval(&a, &b);
            assert_eq!(v, m.eval(&b, &a));
            assert!(v > 0.0 && v <= 1.0);
        }
        assert!(KernelSpec::new(KernelFamily::Gaussian, vec![0.0]).is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::from_1d(&[0.0, 0.0], &[1.0, 2.0]).is_err());
        assert!(Dataset::from_1d(&[0.0, 1.0], &[1.0]).is_err());
        assert!(Dataset::from_1d(&[0.0, f64::NAN], &[1.0, 2.0]).is_err());
        let d = line_data(5);
        assert!(d
            .check_in_box(&DomainBox::interval(0.0, 1.0).unwrap())
            .is_ok());
        assert!(d
            .check_in_box(&DomainBox::interval(0.0, 0.5).unwrap())
            .is_err());
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let d = noisy_simple_linear(6, 2);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::from_csv_reader(buf.as_slice()).unwrap();
        assert_eq!(back, d);
        let bad = "a,y\n0.1,2\n";
        assert!(Dataset::from_csv_reader(bad.as_bytes()).is_err());
        let two = "x1,x2,y\n0,0,1\n1,0.5,2\n0.3,0.2,0\n";
        assert_eq!(Dataset::from_csv_reader(two.as_bytes()).unwrap().k(), 2);
    }

    #[test]
    fn gcv_zero_response_and_large_lambda_limit() {
        let d = line_data(6);
        let zero = d.with_responses(DVector::zeros(6)).unwrap();
        assert_eq!(
            gcv_score(&zero, &KernelSpec::gaussian(0.3), 1e-3).unwrap(),
            0.0
        );
        let k = KernelSpec::gaussian(0.3);
        let limit = d.responses().norm_squared() / 6.0;
        let s = gcv_score(&d, &k, 1e12).unwrap();
        assert!((s - limit).abs() < 1e-9 * limit);
        assert!(matches!(
            gcv_score(&d, &k, 0.0),
            Err(Error::DegenerateSmoother(_))
        ));
    }

    #[test]
    fn gcv_interior_minimum_on_noisy_design() {
        let d = noisy_simple_linear(20, 7);
        let k = KernelSpec::gaussian(0.2);
        let grid = default_lambda_grid();
        let scores: Vec<f64> = grid
            .iter()
            .map(|l| gcv_score(&d, &k, *l).unwrap())
            .collect();
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(
            min < scores[0] && min < scores[grid.len() - 1],
            "{scores:?}"
        );
    }

    #[test]
    fn near_interpolation_of_noiseless_line() {
        let d = line_data(10);
        let mut cfg = SmootherConfig::default();
        cfg.lambda_grid = vec![1e-8];
        let fit = fit_smoother(&d, &cfg).unwrap();
        for i in 0..d.n() {
            assert!((fit.predict_mean(d.x(i)) - d.responses()[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn selection_is_invariant_to_grid_order() {
        let d = noisy_simple_linear(8, 3);
        let cfg = SmootherConfig::default();
        let a = fit_smoother(&d, &cfg).unwrap();
        let mut rev = cfg.clone();
        rev.lambda_grid.reverse();
        rev.rho_factors.reverse();
        let b = fit_smoother(&d, &rev).unwrap();
        assert_eq!(a.lambda(), b.lambda());
        assert_eq!(a.kernel(), b.kernel());
    }

    #[test]
    fn ties_go_to_larger_lambda() {
        let d = line_data(5).with_responses(DVector::zeros(5)).unwrap();
        let fit = fit_smoother(&d, &SmootherConfig::default()).unwrap();
        assert_eq!(fit.lambda(), 10.0);
    }

    #[test]
    fn selection_is_scale_invariant() {
        let d = noisy_simple_linear(8, 5);
        let cfg = SmootherConfig::default();
        let a = fit_smoother(&d, &cfg).unwrap();
        let b = fit_smoother(&d.with_responses(d.responses() * 10.0).unwrap(), &cfg).unwrap();
        assert_eq!(a.lambda(), b.lambda());
        assert_eq!(a.kernel(), b.kernel());
        assert!((b.sigma2_hat() - 100.0 * a.sigma2_hat()).abs() < 1e-9 * b.sigma2_hat());
    }

    #[test]
    fn coefficients_solve_the_ridge_system() {
        let d = noisy_simple_linear(8, 9);
        let fit = fit_smoother(&d, &SmootherConfig::default()).unwrap();
        let mut phi = gram(&d, fit.kernel());
        for i in 0..d.n() {
            phi[(i, i)] += fit.lambda();
        }
        let r = (&phi * fit.coefficients() - d.responses()).amax();
        assert!(r < 1e-8 * d.responses().amax());
        assert!(fit.smoother_trace() > 0.0 && fit.smoother_trace() <= d.n() as f64);
        assert!(fit.sigma2_hat() >= 0.0);
    }

    #[test]
    fn prediction_examples() {
        let d = line_data(5);
        let fit = fit_fixed(&d, KernelSpec::gaussian(0.4), 0.0, SigmaEstimator::Gcv).unwrap();
        for i in 0..5 {
            assert!((fit.predict_mean(d.x(i)) - d.responses()[i]).abs() < 1e-8);
        }
        let zero = fit.clone().with_coefficients(DVector::zeros(5)).unwrap();
        assert_eq!(zero.predict_mean(&[0.37]), 0.0);
    }

    #[test]
    fn single_point_weights() {
        let d = Dataset::from_1d(&[0.3], &[1.7]).unwrap();
        let fit = fit_fixed(&d, KernelSpec::gaussian(0.2), 0.0, SigmaEstimator::Gcv).unwrap();
        let g = fit.smoother_weights(&[0.3]);
        assert!((g[0] - 1.0).abs() < 1e-9);
        // no residual degrees of freedom at λ = 0
        assert_eq!(fit.sigma2_hat(), 0.0);
    }

    #[test]
    fn weights_reproduce_prediction_and_linearity() {
        let d = noisy_simple_linear(8, 11);
        let fit = fit_smoother(&d, &SmootherConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x = [rand::Rng::random::<f64>(&mut rng)];
            let g = fit.smoother_weights(&x);
            let via_g = g.dot(d.responses());
            assert!((via_g - fit.predict_mean(&x)).abs() < 1e-12 * (1.0 + via_g.abs()));
        }
        let y1 = d.responses().clone();
        let y2 = DVector::from_fn(8, |i, _| (i as f64).sin());
        let f1 = fit.refit(y1.clone(), SigmaEstimator::Gcv).unwrap();
        let f2 = fit.refit(y2.clone(), SigmaEstimator::Gcv).unwrap();
        let f12 = fit.refit(&y1 + &y2, SigmaEstimator::Gcv).unwrap();
        let f3 = fit.refit(&y1 * 3.0, SigmaEstimator::Gcv).unwrap();
        for x in [0.0, 0.25, 0.6, 1.0] {
            let lhs = f12.predict_mean(&[x]);
            let rhs = f1.predict_mean(&[x]) + f2.predict_mean(&[x]);
            assert!((lhs - rhs).abs() < 1e-10);
            assert!((f3.predict_mean(&[x]) - 3.0 * f1.predict_mean(&[x])).abs() < 1e-10);
        }
    }

    #[test]
    fn pointwise_variance_matches_monte_carlo() {
        let d = noisy_simple_linear(8, 1);
        let base = fit_smoother(&d, &SmootherConfig::default()).unwrap();
        let x = [0.45];
        let g = base.smoother_weights(&x);
        let sigma = 0.25;
        let predicted = sigma * sigma * g.norm_squared();
        let mu: DVector<f64> = DVector::from_iterator(
            8,
            d.design()
                .iter()
                .map(|r| 4.0 * r[0] + r[0] * (5.0 * r[0]).sin()),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let reps = 2000;
        let vals: Vec<f64> = (0..reps)
            .map(|_| {
                let e = DVector::from_fn(8, |_, _| {
                    sigma * {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    }
                });
                g.dot(&(&mu + e))
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!((var / predicted - 1.0).abs() < 0.05, "{var} vs {predicted}");
    }

    #[test]
    fn sigma_estimate_is_in_the_right_range() {
        let cfg = SmootherConfig::default();
        let mut est: Vec<f64> = (0..100)
            .map(|s| {
                fit_smoother(&noisy_simple_linear(8, 1000 + s), &cfg)
                    .unwrap()
                    .sigma2_hat()
            })
            .collect();
        est.sort_by(f64::total_cmp);
        let median = 0.5 * (est[49] + est[50]);
        assert!(
            median > 0.0625 / 3.0 && median < 0.0625 * 3.0,
            "median {median}"
        );
        let mut rd = cfg.clone();
        rd.sigma = SigmaEstimator::ResidualDf;
        let mut est: Vec<f64> = (0..100)
            .map(|s| {
                fit_smoother(&noisy_simple_linear(8, 1000 + s), &rd)
                    .unwrap()
                    .sigma2_hat()
            })
            .collect();
        est.sort_by(f64::total_cmp);
        let median = 0.5 * (est[49] + est[50]);
        assert!(
            median > 0.0625 / 3.0 && median < 0.0625 * 3.0,
            "median {median}"
        );
    }

    #[test]
    fn rejects_tiny_datasets_and_empty_grids() {
        let d = Dataset::from_1d(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert!(fit_smoother(&d, &SmootherConfig::default()).is_err());
        let mut cfg = SmootherConfig::default();
        cfg.lambda_grid.clear();
        assert!(fit_smoother(&line_data(5), &cfg).is_err());
    }
}
