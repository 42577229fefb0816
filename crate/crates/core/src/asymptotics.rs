//! Sandwich matrices V (curvature) and W (score variance) for θ̂, in the
//! random-design and fixed-design regimes, with plug-in σ̂².

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationEstimate, Method};
use crate::error::{Error, Result};
use crate::models::MathModel;
use crate::numerics::{integrate_matrix, min_eigenvalue, pd_inverse, symmetrize, QuadratureRule};
use crate::smoother::SmootherFit;

/// Which regime (and, for the fixed-design regime, which W̄ formula) a set of
/// matrices belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SandwichVariant {
    Marginal,
    ConditionalLiteral,
    ConditionalDerived,
}

impl SandwichVariant {
    pub fn is_conditional(self) -> bool {
        !matches!(self, Self::Marginal)
    }
}

/// W̄ formula for the fixed-design regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionalForm {
    /// 4σ̂² ∫ ∂η ∂ηᵀ ‖g(x)‖² dx.
    Literal,
    /// 4σ̂² ∫∫ ∂η(x) ∂η(x′)ᵀ g(x)ᵀg(x′) dx dx′, the exact covariance of the
    /// loss gradient at fixed design.
    Derived,
}

/// V, W (and optionally W_E) at θ̂.
///
/// In both regimes V⁻¹WV⁻¹ approximates the sampling covariance of θ̂ itself,
/// so W already carries the 1/n factor.
#[derive(Debug, Clone)]
pub struct SandwichMatrices {
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub w_e: Option<DMatrix<f64>>,
    pub variant: SandwichVariant,
    pub n: usize,
    pub sigma2: f64,
}

impl SandwichMatrices {
    pub fn p(&self) -> usize {
        self.v.nrows()
    }

    /// W, plus W_E when present.
    pub fn w_total(&self) -> DMatrix<f64> {
        match &self.w_e {
            Some(we) => &self.w + we,
            None => self.w.clone(),
        }
    }

    /// nW: the score variance per observation.
    pub fn unit_w(&self) -> DMatrix<f64> {
        self.w_total() * self.n as f64
    }

    pub fn v_inverse(&self) -> Result<DMatrix<f64>> {
        pd_inverse(&self.v)
            .ok_or_else(|| Error::SingularCurvature("V has no Cholesky factor".into()))
    }

    /// V⁻¹ W V⁻¹ (with W_E added when present).
    pub fn sandwich(&self) -> Result<DMatrix<f64>> {
        let vi = self.v_inverse()?;
        Ok(symmetrize(&(&vi * self.w_total() * &vi)))
    }
}

fn check_v(v: &DMatrix<f64>) -> Result<()> {
    let min = min_eigenvalue(v);
    if !(min > 1e-10 * v.norm()) {
        return Err(Error::SingularCurvature(format!(
            "smallest eigenvalue of V is {min:e}"
        )));
    }
    Ok(())
}

fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    let min = min_eigenvalue(m);
    if min < -1e-10 * m.norm() {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    Ok(())
}

fn outer_grad_integral(
    model: &MathModel,
    theta: &[f64],
    rule: &QuadratureRule,
    weight: impl Fn(&[f64]) -> f64,
) -> Result<DMatrix<f64>> {
    integrate_matrix(
        |x| {
            let d = model.grad_eta(theta, x);
            &d * d.transpose() * weight(x)
        },
        rule,
    )
    .map(|m| symmetrize(&m))
}

/// Random-design matrices: V = V̂, W = 4σ̂²/(n·Vol) ∫ ∂η ∂ηᵀ.
pub fn marginal_matrices(
    est: &CalibrationEstimate,
    fit: &SmootherFit,
    model: &MathModel,
    rule: &QuadratureRule,
) -> Result<SandwichMatrices> {
    check_v(&est.hessian)?;
    let n = fit.data().n();
    let sigma2 = fit.sigma2_hat();
    let scale = 4.0 * sigma2 / (n as f64 * model.x_box().volume());
    let w = outer_grad_integral(model, &est.theta_hat, rule, |_| 1.0)? * scale;
    check_psd(&w)?;
    Ok(SandwichMatrices {
        v: est.hessian.clone(),
        w,
        w_e: None,
        variant: SandwichVariant::Marginal,
        n,
        sigma2,
    })
}

/// Least-squares matrices: marginal W plus the bias term
/// W_E = 4/(n·Vol) ∫ (μ̂ − η)² ∂η ∂ηᵀ. V is the least-squares Hessian.
pub fn ols_matrices(
    est: &CalibrationEstimate,
    fit: &SmootherFit,
    model: &MathModel,
    rule: &QuadratureRule,
) -> Result<SandwichMatrices> {
    if est.method != Method::OLS {
        return Err(Error::Parameter(
            "ols_matrices needs a least-squares estimate".into(),
        ));
    }
    let mut sw = marginal_matrices(est, fit, model, rule)?;
    let scale = 4.0 / (sw.n as f64 * model.x_box().volume());
    let theta = &est.theta_hat;
    let w_e = outer_grad_integral(model, theta, rule, |x| {
        (fit.predict_mean(x) - model.eta(theta, x)).powi(2)
    })? * scale;
    check_psd(&w_e)?;
    sw.w_e = Some(w_e);
    Ok(sw)
}

/// A = ∫ ∂η(θ̂, x) g(x)ᵀ dx (p × n), with g(x) = (K + λI)⁻¹ k(x).
pub fn gradient_weight_integral(
    fit: &SmootherFit,
    model: &MathModel,
    theta: &[f64],
    rule: &QuadratureRule,
) -> DMatrix<f64> {
    let g = fit.weights_at_nodes(rule);
    let mut a = DMatrix::zeros(model.p(), fit.data().n());
    for (j, (x, w)) in rule.iter().enumerate() {
        let d = model.grad_eta(theta, x);
        a.ger(w, &d, &g.column(j), 1.0);
    }
    a
}

/// Fixed-design matrices V̄ = V̂ and W̄ in the requested form.
pub fn conditional_matrices(
    est: &CalibrationEstimate,
    fit: &SmootherFit,
    model: &MathModel,
    rule: &QuadratureRule,
    form: ConditionalForm,
) -> Result<SandwichMatrices> {
    check_v(&est.hessian)?;
    let sigma2 = fit.sigma2_hat();
    let theta = &est.theta_hat;
    let (w, variant) = match form {
        ConditionalForm::Derived => {
            // the double integral factorizes as A Aᵀ
            let a = gradient_weight_integral(fit, model, theta, rule);
            (
                symmetrize(&(&a * a.transpose())) * (4.0 * sigma2),
                SandwichVariant::ConditionalDerived,
            )
        }
        ConditionalForm::Literal => {
            let g = fit.weights_at_nodes(rule);
            let p = model.p();
            let mut acc = DMatrix::zeros(p, p);
            for (j, (x, w)) in rule.iter().enumerate() {
                let d = model.grad_eta(theta, x);
                acc.ger(w * g.column(j).norm_squared(), &d, &d, 1.0);
            }
            (
                symmetrize(&acc) * (4.0 * sigma2),
                SandwichVariant::ConditionalLiteral,
            )
        }
    };
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            node: theta.clone(),
        });
    }
    check_psd(&w)?;
    Ok(SandwichMatrices {
        v: est.hessian.clone(),
        w,
        w_e: None,
        variant,
        n: fit.data().n(),
        sigma2,
    })
}

/// sup over quadrature nodes of Σᵢ gᵢ(x)²/i², a finite-design proxy for the
/// summability condition on the smoother weights. Reported, never enforced.
pub fn weight_summability(fit: &SmootherFit, rule: &QuadratureRule) -> f64 {
    let g = fit.weights_at_nodes(rule);
    (0..g.ncols())
        .map(|j| {
            g.column(j)
                .iter()
                .enumerate()
                .map(|(i, v)| v * v / ((i + 1) as f64).powi(2))
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}
