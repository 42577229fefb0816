use thiserror::Error;

/// Errors produced anywhere in the calibration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown scenario `{name}`; valid names are: {valid}")]
    UnknownScenario { name: String, valid: String },

    #[error("{what} lies outside its domain: {detail}")]
    Domain { what: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite integrand value at quadrature node {node:?}")]
    NonFinite { node: Vec<f64> },

    #[error("matrix is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("degenerate smoother: tr(I - A) = {0:e}")]
    DegenerateSmoother(f64),

    #[error("smoother fit failed: {0}")]
    Fit(String),

    #[error(
        "curvature matrix is not positive definite ({0}); re-run the estimate with more starts"
    )]
    SingularCurvature(String),

    #[error("scaling failed: {0}")]
    Scaling(String),

    #[error("prior too tight: var(theta_hat) = {variance:e} is not below tau2 = {tau2:e}")]
    PriorTooTight { variance: f64, tau2: f64 },

    #[error("need at least {need} draws, got {got}")]
    SampleSize { got: usize, need: usize },

    #[error("invalid dataset: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
