//! Regression fitting and model comparison.
//!
//! Fitters are matrix-pure: they take a [`Design`] (named columns built from a [`Table`] by a
//! [`DesignSpec`] recipe) and a response, and return a [`FitResult`]. Available models:
//!
//! - [`fit_ols`]: least squares via QR, Gaussian log-likelihood at the MLE;
//! - [`fit_lmm_random_intercept`]: maximum-likelihood linear mixed model with one random
//!   intercept, fixed effects and residual variance profiled out, the variance ratio found by a
//!   bounded one-dimensional search;
//! - [`fit_logistic`]: logistic regression by iteratively reweighted least squares.
//!
//! All fitters accept frequency weights, which is how [`bootstrap_ci`] resamples.

mod bootstrap;
mod compare;
mod design;
mod linear;
mod logistic;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use bootstrap::{bootstrap_ci, percentile, BootstrapResult, Interval, DEFAULT_N_SIMS};
pub use compare::{bic, compare, lrt, lrt_from_loglik, CompareReport, LrtResult};
pub use design::{build_design, Column, Design, DesignSpec, Table};
pub use linear::{fit_lmm_random_intercept, fit_ols, fit_ols_weighted, LmmOptions};
pub use logistic::{fit_logistic, fit_logistic_weighted, LogisticOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ols,
    LmmRi,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model_kind: ModelKind,
    pub formula_columns: Vec<String>,
    pub coefficients: IndexMap<String, f64>,
    pub std_errors: IndexMap<String, f64>,
    pub loglik: f64,
    pub n_obs: usize,
    /// Coefficients plus variance parameters (1 for OLS, 2 for the mixed model).
    pub n_params: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Fitter diagnostics and design metadata (iterations, variance ratio, standardization…).
    #[serde(default)]
    pub extras: IndexMap<String, serde_json::Value>,
    /// Fitted values (linear predictor scale for linear models, probabilities for logistic).
    #[serde(skip)]
    pub fitted: Vec<f64>,
}

impl FitResult {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficients.get(name).copied()
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.std_errors.get(name).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit results serialize")
    }
}
