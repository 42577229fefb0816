//! Loss adjustments that give the generalized posterior the sampling spread
//! of θ̂: a scalar weight γ on the loss, or a linear reparameterization Γ
//! about θ̂.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{gradient_weight_integral, SandwichMatrices, SandwichVariant};
use crate::calibration::L2Objective;
use crate::error::{Error, Result};
use crate::models::MathModel;
use crate::numerics::{
    integrate, matrix_rows, min_eigenvalue, pd_inverse, sym_psd_factor, symmetrize, QuadratureRule,
};
use crate::smoother::SmootherFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingKind {
    None,
    Magnitude,
    Curvature,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScalingAdjustment {
    None,
    /// θ ↦ γ ℓ(θ). `variant` is `None` for a user-fixed γ.
    Magnitude {
        gamma: f64,
        variant: Option<SandwichVariant>,
    },
    /// θ ↦ ℓ(anchor + Γ(θ − anchor)).
    Curvature {
        matrix: DMatrix<f64>,
        anchor: Vec<f64>,
        variant: SandwichVariant,
    },
}

impl ScalingAdjustment {
    pub fn fixed_gamma(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Scaling(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        Ok(Self::Magnitude {
            gamma,
            variant: None,
        })
    }

    pub fn kind(&self) -> ScalingKind {
        match self {
            Self::None => ScalingKind::None,
            Self::Magnitude { .. } => ScalingKind::Magnitude,
            Self::Curvature { .. } => ScalingKind::Curvature,
        }
    }

    /// The scalar weight that produces the same normal limit when p = 1:
    /// 1, γ, or Γ².
    pub fn effective_gamma(&self) -> Option<f64> {
        match self {
            Self::None => Some(1.0),
            Self::Magnitude { gamma, .. } => Some(*gamma),
            Self::Curvature { matrix, .. } if matrix.nrows() == 1 => Some(matrix[(0, 0)].powi(2)),
            Self::Curvature { .. } => None,
        }
    }

    pub fn report(&self) -> ScalingReport {
        match self {
            Self::None => ScalingReport {
                kind: ScalingKind::None,
                gamma: None,
                matrix: None,
                anchor: None,
                variant: None,
            },
            Self::Magnitude { gamma, variant } => ScalingReport {
                kind: ScalingKind::Magnitude,
                gamma: Some(*gamma),
                matrix: None,
                anchor: None,
                variant: *variant,
            },
            Self::Curvature {
                matrix,
                anchor,
                variant,
            } => ScalingReport {
                kind: ScalingKind::Curvature,
                gamma: None,
                matrix: Some(matrix_rows(matrix)),
                anchor: Some(anchor.clone()),
                variant: Some(*variant),
            },
        }
    }
}

/// Serializable summary of an adjustment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub kind: ScalingKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<SandwichVariant>,
}

/// γ̃ = p / (n tr[V⁻¹W]).
pub fn magnitude_gamma(sw: &SandwichMatrices) -> Result<ScalingAdjustment> {
    let vi = sw.v_inverse()?;
    let tr = (vi * sw.w_total()).trace();
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(Error::Scaling(format!(
            "tr[V^-1 W] = {tr:e} is not positive"
        )));
    }
    let gamma = sw.p() as f64 / (sw.n as f64 * tr);
    Ok(ScalingAdjustment::Magnitude {
        gamma,
        variant: Some(sw.variant),
    })
}

/// Γ̃ = Γ₁⁻¹Γ₂ with Γ₁ᵀΓ₁ = V and Γ₂ᵀΓ₂ = V(nW)⁻¹V, so that
/// (nΓ̃ᵀVΓ̃)⁻¹ = V⁻¹WV⁻¹.
pub fn curvature_gamma(sw: &SandwichMatrices, anchor: &[f64]) -> Result<ScalingAdjustment> {
    if anchor.len() != sw.p() {
        return Err(Error::Parameter("anchor length must equal p".into()));
    }
    let unit_w = sw.unit_w();
    let min = min_eigenvalue(&unit_w);
    if !(min > 1e-12 * unit_w.norm()) {
        return Err(Error::Scaling(format!(
            "W is singular (smallest eigenvalue {min:e}); use magnitude scaling instead"
        )));
    }
    let w_inv = pd_inverse(&unit_w).ok_or_else(|| Error::Scaling("W is not invertible".into()))?;
    let target = symmetrize(&(&sw.v * w_inv * &sw.v));
    let g2 = sym_psd_factor(&target)?;
    let g1 = sym_psd_factor(&symmetrize(&sw.v))?;
    let g1_inv = g1
        .try_inverse()
        .ok_or_else(|| Error::SingularCurvature("factor of V is singular".into()))?;
    let matrix = g1_inv * g2;
    Ok(ScalingAdjustment::Curvature {
        matrix,
        anchor: anchor.to_vec(),
        variant: sw.variant,
    })
}

/// σ̂² ‖(K+λI)⁻¹ ∫ h k‖² / (∫ h²)², the exact fixed-design variance of θ̂ for
/// a model η(θ, x) = θ h(x).
pub fn linear_theta_variance(
    fit: &SmootherFit,
    model: &MathModel,
    rule: &QuadratureRule,
) -> Result<f64> {
    check_linear(model, rule)?;
    let a = gradient_weight_integral(fit, model, &[0.0], rule);
    let hh = integrate(|x| model.grad_eta(&[0.0], x)[0].powi(2), rule)?;
    Ok(fit.sigma2_hat() * a.norm_squared() / (hh * hh))
}

fn check_linear(model: &MathModel, rule: &QuadratureRule) -> Result<()> {
    if model.p() != 1 {
        return Err(Error::Scaling("variance matching needs p = 1".into()));
    }
    let probes = [model.theta_box().lower()[0], model.theta_box().upper()[0]];
    for (x, _) in rule.iter().step_by((rule.len() / 7).max(1)) {
        let h = model.grad_eta(&[0.0], x)[0];
        for t in probes {
            if (model.eta(&[t], x) - t * h).abs() > 1e-12 * (1.0 + (t * h).abs())
                || model.hess_eta(&[t], x)[(0, 0)] != 0.0
            {
                return Err(Error::Scaling(
                    "variance matching needs a model linear in theta through the origin".into(),
                ));
            }
        }
    }
    Ok(())
}

/// γ̃ equating the posterior variance under a N(0, τ²) prior with the exact
/// variance of θ̂, for a one-parameter model linear in θ.
pub fn variance_matching_gamma(
    fit: &SmootherFit,
    model: &MathModel,
    rule: &QuadratureRule,
    tau2: f64,
) -> Result<f64> {
    if !(tau2 > 0.0) {
        return Err(Error::Parameter(format!(
            "tau2 must be positive, got {tau2}"
        )));
    }
    let variance = linear_theta_variance(fit, model, rule)?;
    if variance >= tau2 {
        return Err(Error::PriorTooTight { variance, tau2 });
    }
    let v = 2.0 * integrate(|x| model.grad_eta(&[0.0], x)[0].powi(2), rule)?;
    let n = fit.data().n() as f64;
    Ok((1.0 / variance - 1.0 / tau2) / (n * v))
}

/// The L² loss after applying an adjustment.
#[derive(Debug, Clone)]
pub struct ScaledLoss {
    base: L2Objective,
    adj: ScalingAdjustment,
    penalty: f64,
}

impl ScaledLoss {
    pub fn new(base: L2Objective, adj: ScalingAdjustment) -> Self {
        let penalty = match &adj {
            ScalingAdjustment::Curvature { anchor, .. } => {
                let h = base.hess(anchor);
                (10.0 * h.trace() / h.nrows() as f64).max(1e-12)
            }
            _ => 0.0,
        };
        Self { base, adj, penalty }
    }

    pub fn base(&self) -> &L2Objective {
        &self.base
    }

    pub fn adjustment(&self) -> &ScalingAdjustment {
        &self.adj
    }

    /// Scaled loss at θ. Under curvature scaling a mapped point outside Θ is
    /// replaced by its projection plus ½ω‖overshoot‖².
    pub fn eval(&self, theta: &[f64]) -> f64 {
        match &self.adj {
            ScalingAdjustment::None => self.base.loss(theta),
            ScalingAdjustment::Magnitude { gamma, .. } => gamma * self.base.loss(theta),
            ScalingAdjustment::Curvature { matrix, anchor, .. } => {
                let mapped = self.map(matrix, anchor, theta);
                let domain = self.base.model().theta_box();
                if domain.contains(&mapped) {
                    self.base.loss(&mapped)
                } else {
                    let proj = domain.project(&mapped);
                    let over: f64 = mapped.iter().zip(&proj).map(|(a, b)| (a - b).powi(2)).sum();
                    self.base.loss(&proj) + 0.5 * self.penalty * over
                }
            }
        }
    }

    fn map(&self, matrix: &DMatrix<f64>, anchor: &[f64], theta: &[f64]) -> Vec<f64> {
        let p = anchor.len();
        (0..p)
            .map(|i| {
                anchor[i]
                    + (0..p)
                        .map(|j| matrix[(i, j)] * (theta[j] - anchor[j]))
                        .sum::<f64>()
            })
            .collect()
    }
}
