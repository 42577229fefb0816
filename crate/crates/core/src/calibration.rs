//! The L² loss ∫(μ̂ − η)² and the least-squares loss, their derivatives, and
//! their minimizers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{MathModel, PhysicalSystem};
use crate::numerics::{minimize_box, symmetrize, MinimizeOptions, QuadratureRule};
use crate::smoother::{Dataset, SmootherFit};

/// The L² loss against a fixed target function, tabulated at the nodes of a
/// quadrature rule. Cheap to clone and to evaluate repeatedly.
#[derive(Debug, Clone)]
pub struct L2Objective {
    model: MathModel,
    rule: QuadratureRule,
    target: Vec<f64>,
}

impl L2Objective {
    pub fn from_fn(
        model: &MathModel,
        rule: &QuadratureRule,
        f: impl Fn(&[f64]) -> f64,
    ) -> Result<Self> {
        if rule.dim() != model.k() {
            return Err(Error::Parameter(format!(
                "quadrature rule has dimension {}, model has k = {}",
                rule.dim(),
                model.k()
            )));
        }
        let target: Vec<f64> = rule.iter().map(|(x, _)| f(x)).collect();
        if let Some(i) = target.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: rule.node(i).to_vec(),
            });
        }
        Ok(Self {
            model: model.clone(),
            rule: rule.clone(),
            target,
        })
    }

    /// Loss against the smoother μ̂.
    pub fn from_fit(fit: &SmootherFit, model: &MathModel, rule: &QuadratureRule) -> Result<Self> {
        Self::from_fn(model, rule, |x| fit.predict_mean(x))
    }

    /// Loss against the true mean μ, whose minimizer is θ_L².
    pub fn population(
        model: &MathModel,
        system: &PhysicalSystem,
        rule: &QuadratureRule,
    ) -> Result<Self> {
        Self::from_fn(model, rule, |x| system.mu(x))
    }

    pub fn model(&self) -> &MathModel {
        &self.model
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    /// Target values at the quadrature nodes.
    pub fn target(&self) -> &[f64] {
        &self.target
    }

    /// ∫ (t − η(θ,·))².
    pub fn loss(&self, theta: &[f64]) -> f64 {
        self.rule
            .iter()
            .zip(&self.target)
            .map(|((x, w), t)| w * (t - self.model.eta(theta, x)).powi(2))
            .sum()
    }

    /// −2 ∫ ∂η (t − η).
    pub fn grad(&self, theta: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.model.p());
        for ((x, w), t) in self.rule.iter().zip(&self.target) {
            let r = t - self.model.eta(theta, x);
            g.axpy(-2.0 * w * r, &self.model.grad_eta(theta, x), 1.0);
        }
        g
    }

    /// 2 ∫ [∂η ∂ηᵀ − (t − η) ∂²η].
    pub fn hess(&self, theta: &[f64]) -> DMatrix<f64> {
        let p = self.model.p();
        let mut h = DMatrix::zeros(p, p);
        for ((x, w), t) in self.rule.iter().zip(&self.target) {
            let r = t - self.model.eta(theta, x);
            let d = self.model.grad_eta(theta, x);
            h.ger(2.0 * w, &d, &d, 1.0);
            h -= self.model.hess_eta(theta, x) * (2.0 * w * r);
        }
        symmetrize(&h)
    }
}

/// ∫ (μ̂ − η(θ,·))² for a fitted smoother.
pub fn tw_loss(
    theta: &[f64],
    fit: &SmootherFit,
    model: &MathModel,
    rule: &QuadratureRule,
) -> Result<f64> {
    model.theta_box().check(theta, "theta")?;
    Ok(L2Objective::from_fit(fit, model, rule)?.loss(theta))
}

pub fn tw_loss_grad(
    theta: &[f64],
    fit: &SmootherFit,
    model: &MathModel,
    rule: &QuadratureRule,
) -> Result<DVector<f64>> {
    model.theta_box().check(theta, "theta")?;
    Ok(L2Objective::from_fit(fit, model, rule)?.grad(theta))
}

pub fn tw_loss_hess(
    theta: &[f64],
    fit: &SmootherFit,
    model: &MathModel,
    rule: &QuadratureRule,
) -> Result<DMatrix<f64>> {
    model.theta_box().check(theta, "theta")?;
    Ok(L2Objective::from_fit(fit, model, rule)?.hess(theta))
}

/// (1/n) Σ (yᵢ − η(θ, xᵢ))².
pub fn ols_loss(theta: &[f64], data: &Dataset, model: &MathModel) -> f64 {
    let n = data.n();
    (0..n)
        .map(|i| (data.responses()[i] - model.eta(theta, data.x(i))).powi(2))
        .sum::<f64>()
        / n as f64
}

/// −(2/n) Σ ∂η (yᵢ − η).
pub fn ols_loss_grad(theta: &[f64], data: &Dataset, model: &MathModel) -> DVector<f64> {
    let n = data.n();
    let mut g = DVector::zeros(model.p());
    for i in 0..n {
        let r = data.responses()[i] - model.eta(theta, data.x(i));
        g.axpy(-2.0 * r / n as f64, &model.grad_eta(theta, data.x(i)), 1.0);
    }
    g
}

/// (2/n) Σ [∂η ∂ηᵀ − (yᵢ − η) ∂²η].
pub fn ols_loss_hess(theta: &[f64], data: &Dataset, model: &MathModel) -> DMatrix<f64> {
    let n = data.n() as f64;
    let p = model.p();
    let mut h = DMatrix::zeros(p, p);
    for i in 0..data.n() {
        let x = data.x(i);
        let r = data.responses()[i] - model.eta(theta, x);
        let d = model.grad_eta(theta, x);
        h.ger(2.0 / n, &d, &d, 1.0);
        h -= model.hess_eta(theta, x) * (2.0 * r / n);
    }
    symmetrize(&h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "tw")]
    TW,
    #[serde(rename = "ols")]
    OLS,
}

/// A minimizer of the calibration loss with the loss Hessian there.
#[derive(Debug, Clone)]
pub struct CalibrationEstimate {
    pub theta_hat: Vec<f64>,
    pub loss_value: f64,
    pub hessian: DMatrix<f64>,
    pub method: Method,
    pub converged: bool,
    /// θ̂ is at least 1e-6 of the box width away from every face.
    pub interior: bool,
}

/// Newton steps with analytic derivatives, accepted only while they stay in
/// the box and do not increase the loss.
fn newton_polish<L, G, H>(
    theta: &mut Vec<f64>,
    value: &mut f64,
    model: &MathModel,
    loss: L,
    grad: G,
    hess: H,
) where
    L: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> DVector<f64>,
    H: Fn(&[f64]) -> DMatrix<f64>,
{
    for _ in 0..8 {
        let g = grad(theta);
        if g.amax() < 1e-13 {
            break;
        }
        let Some(chol) = hess(theta).cholesky() else {
            break;
        };
        let step = chol.solve(&g);
        let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t - s).collect();
        if !model.theta_box().contains(&cand) {
            break;
        }
        let v = loss(&cand);
        if !(v <= *value) {
            break;
        }
        *theta = cand;
        *value = v;
    }
}

fn finish(
    theta: Vec<f64>,
    value: f64,
    hessian: DMatrix<f64>,
    method: Method,
    converged: bool,
    model: &MathModel,
) -> CalibrationEstimate {
    let interior = model.theta_box().is_interior(&theta, 1e-6);
    CalibrationEstimate {
        theta_hat: theta,
        loss_value: value.max(0.0),
        hessian,
        method,
        converged,
        interior,
    }
}

/// Minimizes the L² objective over the model's parameter box.
pub fn minimize_l2(obj: &L2Objective, opts: &MinimizeOptions) -> Result<CalibrationEstimate> {
    let model = obj.model();
    let m = minimize_box(|t| obj.loss(t), model.theta_box(), opts)?;
    let (mut theta, mut value) = (m.argmin, m.value);
    newton_polish(
        &mut theta,
        &mut value,
        model,
        |t| obj.loss(t),
        |t| obj.grad(t),
        |t| obj.hess(t),
    );
    let h = obj.hess(&theta);
    Ok(finish(theta, value, h, Method::TW, m.converged, model))
}

/// Minimizes the least-squares loss over the model's parameter box.
pub fn minimize_ols(
    data: &Dataset,
    model: &MathModel,
    opts: &MinimizeOptions,
) -> Result<CalibrationEstimate> {
    let m = minimize_box(|t| ols_loss(t, data, model), model.theta_box(), opts)?;
    let (mut theta, mut value) = (m.argmin, m.value);
    newton_polish(
        &mut theta,
        &mut value,
        model,
        |t| ols_loss(t, data, model),
        |t| ols_loss_grad(t, data, model),
        |t| ols_loss_hess(t, data, model),
    );
    let h = ols_loss_hess(&theta, data, model);
    Ok(finish(theta, value, h, Method::OLS, m.converged, model))
}

/// θ̂_TW (against μ̂) or θ̂_OLS (against the fit's raw data).
pub fn estimate_theta(
    fit: &SmootherFit,
    model: &MathModel,
    rule: &QuadratureRule,
    method: Method,
    opts: &MinimizeOptions,
) -> Result<CalibrationEstimate> {
    match method {
        Method::TW => minimize_l2(&L2Objective::from_fit(fit, model, rule)?, opts),
        Method::OLS => minimize_ols(fit.data(), model, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{lookup_scenario, DomainBox, SCENARIO1_THETA0};
    use crate::numerics::{build_rule, integrate, DEFAULT_QUAD_ORDER};
    use crate::smoother::{fit_fixed, fit_smoother, KernelSpec, SigmaEstimator, SmootherConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear() -> (MathModel, QuadratureRule) {
        let (m, _) = lookup_scenario("simple-linear").unwrap();
        let rule = build_rule(m.x_box(), DEFAULT_QUAD_ORDER).unwrap();
        (m, rule)
    }

    fn noisy_fit(n: usize, seed: u64) -> SmootherFit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 4.0 * v + v * (5.0 * v).sin() + 0.25 * (rng.random::<f64>() - 0.5))
            .collect();
        fit_smoother(
            &Dataset::from_1d(&x, &y).unwrap(),
            &SmootherConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn linear_loss_values() {
        let (m, rule) = linear();
        let obj = L2Objective::from_fn(&m, &rule, |x| 4.0 * x[0]).unwrap();
        assert!((obj.loss(&[1.0]) - 3.0).abs() < 1e-12);
        assert!(obj.loss(&[4.0]).abs() < 1e-14);
        for t in [-3.0, 0.5, 7.0] {
            assert!((obj.hess(&[t])[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
            let h = 1e-3;
            let fd = (obj.loss(&[t + h]) - 2.0 * obj.loss(&[t]) + obj.loss(&[t - h])) / (h * h);
            assert!((fd - 2.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn free_function_forms_agree_and_check_box() {
        let (m, rule) = linear();
        let fit = noisy_fit(8, 1);
        let obj = L2Objective::from_fit(&fit, &m, &rule).unwrap();
        assert_eq!(tw_loss(&[3.0], &fit, &m, &rule).unwrap(), obj.loss(&[3.0]));
        assert_eq!(
            tw_loss_grad(&[3.0], &fit, &m, &rule).unwrap(),
            obj.grad(&[3.0])
        );
        assert_eq!(
            tw_loss_hess(&[3.0], &fit, &m, &rule).unwrap(),
            obj.hess(&[3.0])
        );
        assert!(tw_loss(&[25.0], &fit, &m, &rule).is_err());
    }

    #[test]
    fn exact_target_gives_zero_loss() {
        let (m, s) = lookup_scenario("scenario1").unwrap();
        let rule = build_rule(m.x_box(), 32).unwrap();
        let obj = L2Objective::population(&m, &s, &rule).unwrap();
        assert!(obj.loss(&SCENARIO1_THETA0) < 1e-20);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for name in ["scenario1", "scenario2", "scenario3", "simple-linear"] {
            let (m, s) = lookup_scenario(name).unwrap();
            let order = if m.k() > 1 { 24 } else { 64 };
            let rule = build_rule(m.x_box(), order).unwrap();
            let obj = L2Objective::population(&m, &s, &rule).unwrap();
            for _ in 0..20 {
                let theta: Vec<f64> = (0..m.p())
                    .map(|j| {
                        let (a, b) = (m.theta_box().lower()[j], m.theta_box().upper()[j]);
                        a + (b - a) * (0.05 + 0.9 * rng.random::<f64>())
                    })
                    .collect();
                let g = obj.grad(&theta);
                let h = obj.hess(&theta);
                for j in 0..m.p() {
                    let step = 1e-5 * (1.0 + theta[j].abs());
                    let mut tp = theta.clone();
                    let mut tm = theta.clone();
                    tp[j] += step;
                    tm[j] -= step;
                    let fd = (obj.loss(&tp) - obj.loss(&tm)) / (2.0 * step);
                    let scale = g.amax().max(1e-8);
                    assert!(
                        (fd - g[j]).abs() / scale < 1e-5,
                        "{name} grad {j}: {fd} vs {}",
                        g[j]
                    );
                    let dg = (obj.grad(&tp) - obj.grad(&tm)) / (2.0 * step);
                    let hs = h.amax().max(1e-8);
                    for i in 0..m.p() {
                        assert!((dg[i] - h[(i, j)]).abs() / hs < 1e-5, "{name} hess");
                    }
                }
            }
        }
    }

    #[test]
    fn linear_estimate_matches_closed_form() {
        let (m, rule) = linear();
        for seed in 0..5 {
            let fit = noisy_fit(8, seed);
            let est =
                estimate_theta(&fit, &m, &rule, Method::TW, &MinimizeOptions::default()).unwrap();
            let closed = 3.0 * integrate(|x| x[0] * fit.predict_mean(x), &rule).unwrap();
            assert!((est.theta_hat[0] - closed).abs() < 1e-6);
            let obj = L2Objective::from_fit(&fit, &m, &rule).unwrap();
            assert!(obj.grad(&est.theta_hat).amax() < 1e-6);
            assert!(est.converged && est.interior);
            assert!((est.hessian[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn population_minimizers() {
        let (m, s) = lookup_scenario("scenario2").unwrap();
        let rule = build_rule(m.x_box(), DEFAULT_QUAD_ORDER).unwrap();
        let est = minimize_l2(
            &L2Objective::population(&m, &s, &rule).unwrap(),
            &MinimizeOptions::default(),
        )
        .unwrap();
        assert!(
            (est.theta_hat[0] - 1.8771).abs() < 2e-3,
            "{:?}",
            est.theta_hat
        );
        let (m, s) = lookup_scenario("scenario1").unwrap();
        let rule = build_rule(m.x_box(), 32).unwrap();
        let est = minimize_l2(
            &L2Objective::population(&m, &s, &rule).unwrap(),
            &MinimizeOptions::default(),
        )
        .unwrap();
        for j in 0..2 {
            assert!(
                (est.theta_hat[j] - SCENARIO1_THETA0[j]).abs() < 1e-4,
                "{:?}",
                est.theta_hat
            );
        }
    }

    #[test]
    fn global_minimum_spot_check() {
        let (m, s) = lookup_scenario("scenario2").unwrap();
        let rule = build_rule(m.x_box(), DEFAULT_QUAD_ORDER).unwrap();
        let obj = L2Objective::population(&m, &s, &rule).unwrap();
        let est = minimize_l2(&obj, &MinimizeOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let t = [3.0 * rng.random::<f64>()];
            assert!(est.loss_value <= obj.loss(&t) + 1e-15);
        }
    }

    #[test]
    fn taylor_remainder_is_cubic() {
        let (m, s) = lookup_scenario("scenario2").unwrap();
        let rule = build_rule(m.x_box(), DEFAULT_QUAD_ORDER).unwrap();
        let obj = L2Objective::population(&m, &s, &rule).unwrap();
        let est = minimize_l2(&obj, &MinimizeOptions::default()).unwrap();
        let v = est.hessian[(0, 0)];
        let mut ratios = Vec::new();
        let mut r = 0.2;
        for _ in 0..5 {
            let t = est.theta_hat[0] + r;
            let rem = (obj.loss(&[t]) - est.loss_value - 0.5 * v * r * r).abs();
            ratios.push(rem / r.powi(3));
            r /= 2.0;
        }
        // remainder / r³ stays bounded as the radius halves
        for w in ratios.windows(2) {
            assert!(w[1] < 1.5 * w[0] + 1e-6, "{ratios:?}");
        }
    }

    #[test]
    fn ols_examples() {
        let m = MathModel::linear_through_origin(
            "lin",
            DomainBox::interval(-5.0, 5.0).unwrap(),
            DomainBox::interval(0.0, 1.0).unwrap(),
        );
        let d = Dataset::from_1d(&[1.0], &[2.0]).unwrap();
        assert_eq!(ols_loss(&[1.0], &d, &m), 1.0);
        let d = Dataset::from_1d(&[0.2, 0.5, 1.0], &[0.6, 1.5, 3.0]).unwrap();
        assert!(ols_loss(&[3.0], &d, &m) < 1e-28);
        let fit = fit_fixed(&d, KernelSpec::gaussian(0.5), 1e-3, SigmaEstimator::Gcv).unwrap();
        let rule = build_rule(m.x_box(), 32).unwrap();
        let est =
            estimate_theta(&fit, &m, &rule, Method::OLS, &MinimizeOptions::default()).unwrap();
        assert!((est.theta_hat[0] - 3.0).abs() < 1e-8);
        assert_eq!(est.method, Method::OLS);
        let h = ols_loss_hess(&[0.3], &d, &m)[(0, 0)];
        let expect = 2.0 * (0.04 + 0.25 + 1.0) / 3.0;
        assert!((h - expect).abs() < 1e-14);
        let g = ols_loss_grad(&[0.3], &d, &m)[0];
        let fd = (ols_loss(&[0.3 + 1e-6], &d, &m) - ols_loss(&[0.3 - 1e-6], &d, &m)) / 2e-6;
        assert!((g - fd).abs() < 1e-6);
    }

    #[test]
    fn ols_loss_nonnegative() {
        let m = MathModel::linear_through_origin(
            "lin",
            DomainBox::interval(-5.0, 5.0).unwrap(),
            DomainBox::interval(0.0, 1.0).unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|i| i as f64 / 4.0).collect();
            let y: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let d = Dataset::from_1d(&x, &y).unwrap();
            assert!(ols_loss(&[rng.random::<f64>() * 10.0 - 5.0], &d, &m) >= 0.0);
        }
    }
}
