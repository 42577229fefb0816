//! Mathematical models η(θ, x), the physical systems μ(x) they try to
//! describe, and the built-in scenarios.
//!
//! A [`MathModel`] is a function triple: the model value, its gradient with
//! respect to θ and its θ-Hessian. Built-in models ship analytic
//! derivatives; user models supply their own and can be checked with
//! [`check_derivatives`].

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Names accepted by [`lookup_scenario`].
pub const SCENARIO_NAMES: [&str; 4] = ["scenario1", "scenario2", "scenario3", "simple-linear"];

/// Axis-aligned box `[lower, upper]` in ℝᵈ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Parameter(format!(
                "box bounds must be non-empty and of equal length (got {} and {})",
                lower.len(),
                upper.len()
            )));
        }
        for (j, (a, b)) in lower.iter().zip(&upper).enumerate() {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::Parameter(format!(
                    "box coordinate {j}: need finite lower < upper, got [{a}, {b}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// One-dimensional interval `[a, b]`.
    pub fn interval(a: f64, b: f64) -> Result<Self> {
        Self::new(vec![a], vec![b])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, j: usize) -> f64 {
        self.upper[j] - self.lower[j]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|j| self.width(j)).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (a, b))| *x >= *a && *x <= *b)
    }

    /// Closest point of the box (coordinate-wise clamp).
    pub fn project(&self, point: &[f64]) -> Vec<f64> {
        point
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (a, b))| x.clamp(*a, *b))
            .collect()
    }

    /// True when `point` is inside the box and at least `margin` (relative
    /// to each width) away from every face.
    pub fn is_interior(&self, point: &[f64], margin: f64) -> bool {
        self.contains(point)
            && (0..self.dim()).all(|j| {
                let m = margin * self.width(j);
                point[j] - self.lower[j] > m && self.upper[j] - point[j] > m
            })
    }

    pub(crate) fn check(&self, point: &[f64], what: &'static str) -> Result<()> {
        if self.contains(point) {
            Ok(())
        } else {
            Err(Error::Domain {
                what,
                detail: format!("{point:?} not in [{:?}, {:?}]", self.lower, self.upper),
            })
        }
    }
}

type EtaFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], &[f64]) -> DVector<f64> + Send + Sync;
type HessFn = dyn Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync;

/// A mathematical model η(θ, x) with analytic θ-derivatives.
#[derive(Clone)]
pub struct MathModel {
    name: String,
    theta_box: DomainBox,
    x_box: DomainBox,
    eta: Arc<EtaFn>,
    grad: Arc<GradFn>,
    hess: Arc<HessFn>,
}

impl fmt::Debug for MathModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MathModel")
            .field("name", &self.name)
            .field("theta_box", &self.theta_box)
            .field("x_box", &self.x_box)
            .finish_non_exhaustive()
    }
}

impl MathModel {
    /// Build a model from a value/gradient/Hessian triple. Derivative
    /// correctness is the caller's responsibility; see [`check_derivatives`].
    pub fn custom<E, G, H>(
        name: impl Into<String>,
        theta_box: DomainBox,
        x_box: DomainBox,
        eta: E,
        grad: G,
        hess: H,
    ) -> Self
    where
        E: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64], &[f64]) -> DVector<f64> + Send + Sync + 'static,
        H: Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            theta_box,
            x_box,
            eta: Arc::new(eta),
            grad: Arc::new(grad),
            hess: Arc::new(hess),
        }
    }

    /// The one-parameter model η(θ, x) = θ·x on the given boxes.
    pub fn linear_through_origin(name: &str, theta_box: DomainBox, x_box: DomainBox) -> Self {
        Self::custom(
            name,
            theta_box,
            x_box,
            |t, x| t[0] * x[0],
            |_, x| DVector::from_element(1, x[0]),
            |_, _| DMatrix::zeros(1, 1),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn theta_box(&self) -> &DomainBox {
        &self.theta_box
    }

    pub fn x_box(&self) -> &DomainBox {
        &self.x_box
    }

    /// Number of calibration parameters p.
    pub fn p(&self) -> usize {
        self.theta_box.dim()
    }

    /// Number of inputs k.
    pub fn k(&self) -> usize {
        self.x_box.dim()
    }

    #[inline]
    pub fn eta(&self, theta: &[f64], x: &[f64]) -> f64 {
        (self.eta)(theta, x)
    }

    #[inline]
    pub fn grad_eta(&self, theta: &[f64], x: &[f64]) -> DVector<f64> {
        (self.grad)(theta, x)
    }

    #[inline]
    pub fn hess_eta(&self, theta: &[f64], x: &[f64]) -> DMatrix<f64> {
        (self.hess)(theta, x)
    }

    /// Returns a copy of the model with a different parameter box.
    pub fn with_theta_box(mut self, theta_box: DomainBox) -> Result<Self> {
        if theta_box.dim() != self.p() {
            return Err(Error::Parameter("theta box dimension mismatch".into()));
        }
        self.theta_box = theta_box;
        Ok(self)
    }
}

/// How design points are laid out when generating data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignRule {
    /// Independent draws from U(X).
    UniformRandom,
    /// `n` evenly spaced points on `[lower, upper]`, endpoints included
    /// (one input only).
    Equidistant { lower: f64, upper: f64 },
}

/// A true physical system μ(x) observed with Gaussian noise.
#[derive(Clone)]
pub struct PhysicalSystem {
    name: String,
    mu: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    sigma: f64,
    design: DesignRule,
    default_n: usize,
}

impl fmt::Debug for PhysicalSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PhysicalSystem")
            .field("name", &self.name)
            .field("sigma", &self.sigma)
            .field("design", &self.design)
            .field("default_n", &self.default_n)
            .finish_non_exhaustive()
    }
}

impl PhysicalSystem {
    pub fn new<M>(
        name: impl Into<String>,
        mu: M,
        sigma: f64,
        design: DesignRule,
        default_n: usize,
    ) -> Result<Self>
    where
        M: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Parameter(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if let DesignRule::Equidistant { lower, upper } = design {
            if !(lower < upper) {
                return Err(Error::Parameter(
                    "equidistant design needs lower < upper".into(),
                ));
            }
        }
        Ok(Self {
            name: name.into(),
            mu: Arc::new(mu),
            sigma,
            design,
            default_n,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn mu(&self, x: &[f64]) -> f64 {
        (self.mu)(x)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn design(&self) -> DesignRule {
        self.design
    }

    pub fn default_n(&self) -> usize {
        self.default_n
    }

    /// Same system with a different noise level; zero gives noiseless data.
    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Parameter(format!(
                "sigma must be nonnegative, got {sigma}"
            )));
        }
        self.sigma = sigma;
        Ok(self)
    }
}

fn scenario1_eta(t: &[f64], x: &[f64]) -> f64 {
    let a = 2.0 * PI * t[0] - PI;
    let b = 2.0 * PI * t[1] - PI;
    7.0 * a.sin().powi(2) + 2.0 * (b * b * (2.0 * PI * x[0] - PI).sin())
}

fn mu_linear_plus_sine(x: &[f64]) -> f64 {
    4.0 * x[0] + x[0] * (5.0 * x[0]).sin()
}

/// Parameter value generating the scenario 1 physical system.
pub const SCENARIO1_THETA0: [f64; 2] = [0.2, 0.3];

/// Returns the model and physical system registered under `name`.
pub fn lookup_scenario(name: &str) -> Result<(MathModel, PhysicalSystem)> {
    let unit = DomainBox::interval(0.0, 1.0)?;
    match name {
        "scenario1" => {
            let model = MathModel::custom(
                "scenario1",
                DomainBox::new(vec![0.0, 0.0], vec![0.25, 0.5])?,
                unit,
                scenario1_eta,
                |t, x| {
                    let a = 2.0 * PI * t[0] - PI;
                    let b = 2.0 * PI * t[1] - PI;
                    let s = (2.0 * PI * x[0] - PI).sin();
                    DVector::from_vec(vec![14.0 * PI * (2.0 * a).sin(), 8.0 * PI * b * s])
                },
                |t, x| {
                    let a = 2.0 * PI * t[0] - PI;
                    let s = (2.0 * PI * x[0] - PI).sin();
                    DMatrix::from_row_slice(
                        2,
                        2,
                        &[
                            56.0 * PI * PI * (2.0 * a).cos(),
                            0.0,
                            0.0,
                            16.0 * PI * PI * s,
                        ],
                    )
                },
            );
            let system = PhysicalSystem::new(
                "scenario1",
                |x| scenario1_eta(&SCENARIO1_THETA0, x),
                0.2,
                DesignRule::UniformRandom,
                50,
            )?;
            Ok((model, system))
        }
        "scenario2" => {
            let model = MathModel::custom(
                "scenario2",
                DomainBox::interval(0.0, 3.0)?,
                unit,
                |t, x| (5.0 * t[0] * x[0]).sin() + 5.0 * x[0],
                |t, x| DVector::from_element(1, 5.0 * x[0] * (5.0 * t[0] * x[0]).cos()),
                |t, x| DMatrix::from_element(1, 1, -25.0 * x[0] * x[0] * (5.0 * t[0] * x[0]).sin()),
            );
            let system = PhysicalSystem::new(
                "scenario2",
                |x| 5.0 * x[0] * (7.5 * x[0]).cos() + 5.0 * x[0],
                0.2,
                DesignRule::Equidistant {
                    lower: 0.0,
                    upper: 1.0,
                },
                30,
            )?;
            Ok((model, system))
        }
        "scenario3" => {
            let model =
                MathModel::linear_through_origin("scenario3", DomainBox::interval(2.0, 4.0)?, unit);
            let system = PhysicalSystem::new(
                "scenario3",
                mu_linear_plus_sine,
                0.02,
                DesignRule::Equidistant {
                    lower: 0.0,
                    upper: 0.8,
                },
                17,
            )?;
            Ok((model, system))
        }
        "simple-linear" => {
            // Θ = ℝ in principle; a wide box keeps optimizer and sampler bounded.
            let model = MathModel::linear_through_origin(
                "simple-linear",
                DomainBox::interval(-20.0, 20.0)?,
                unit,
            );
            let system = PhysicalSystem::new(
                "simple-linear",
                mu_linear_plus_sine,
                0.25,
                DesignRule::Equidistant {
                    lower: 0.0,
                    upper: 1.0,
                },
                4,
            )?;
            Ok((model, system))
        }
        other => Err(Error::UnknownScenario {
            name: other.to_string(),
            valid: SCENARIO_NAMES.join(", "),
        }),
    }
}

/// δ_θ(x) = μ(x) − η(θ, x).
pub fn eval_bias(
    model: &MathModel,
    system: &PhysicalSystem,
    theta: &[f64],
    x: &[f64],
) -> Result<f64> {
    model.theta_box().check(theta, "theta")?;
    model.x_box().check(x, "x")?;
    Ok(system.mu(x) - model.eta(theta, x))
}

/// Worst discrepancies found by [`check_derivatives`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    pub max_grad_error: f64,
    pub max_hess_error: f64,
    pub max_hess_asymmetry: f64,
}

impl DerivativeCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_grad_error < tol && self.max_hess_error < tol && self.max_hess_asymmetry < tol
    }
}

/// Compares the analytic gradient and Hessian of `model` with central
/// differences at `points` random interior (θ, x) pairs.
///
/// Errors are relative, `|fd − analytic| / max(1, |analytic|)`.
pub fn check_derivatives(model: &MathModel, points: usize, seed: u64) -> DerivativeCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = model.p();
    let mut worst = DerivativeCheck {
        max_grad_error: 0.0,
        max_hess_error: 0.0,
        max_hess_asymmetry: 0.0,
    };
    let interior = |rng: &mut ChaCha8Rng, b: &DomainBox| -> Vec<f64> {
        (0..b.dim())
            .map(|j| b.lower()[j] + b.width(j) * rng.random_range(0.05..0.95))
            .collect()
    };
    for _ in 0..points {
        let theta = interior(&mut rng, model.theta_box());
        let x = interior(&mut rng, model.x_box());
        let g = model.grad_eta(&theta, &x);
        let h = model.hess_eta(&theta, &x);
        for i in 0..p {
            let step = f64::EPSILON.cbrt() * theta[i].abs().max(1.0);
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += step;
            tm[i] -= step;
            let fd = (model.eta(&tp, &x) - model.eta(&tm, &x)) / (2.0 * step);
            let err = (fd - g[i]).abs() / g[i].abs().max(1.0);
            worst.max_grad_error = worst.max_grad_error.max(err);

            let gd = (model.grad_eta(&tp, &x) - model.grad_eta(&tm, &x)) / (2.0 * step);
            for j in 0..p {
                let err = (gd[j] - h[(j, i)]).abs() / h[(j, i)].abs().max(1.0);
                worst.max_hess_error = worst.max_hess_error.max(err);
                let asym = (h[(i, j)] - h[(j, i)]).abs() / h[(i, j)].abs().max(1.0);
                worst.max_hess_asymmetry = worst.max_hess_asymmetry.max(asym);
            }
        }
    }
    worst
}
