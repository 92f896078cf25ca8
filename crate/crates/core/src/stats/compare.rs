//! Likelihood-ratio tests and information criteria.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::FitResult;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub chi2: f64,
    pub df: usize,
    pub p: f64,
}

/// `χ² = 2·(ℓ_big − ℓ_small)` on `df` degrees of freedom, upper-tail p-value.
pub fn lrt_from_loglik(loglik_small: f64, loglik_big: f64, df: usize) -> Result<LrtResult> {
    if df == 0 {
        return Err(Error::Comparison(
            "models are not nested: no extra parameters".into(),
        ));
    }
    if !(loglik_small.is_finite() && loglik_big.is_finite()) {
        return Err(Error::Comparison("non-finite log-likelihood".into()));
    }
    if loglik_big < loglik_small - 1e-8 {
        return Err(Error::Comparison(format!(
            "larger model fits worse ({loglik_big} < {loglik_small}); models are not nested"
        )));
    }
    let chi2 = (2.0 * (loglik_big - loglik_small)).max(0.0);
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    Ok(LrtResult {
        chi2,
        df,
        p: dist.sf(chi2),
    })
}

fn check_usable(fit: &FitResult, which: &str) -> Result<()> {
    if !fit.converged {
        return Err(Error::Comparison(format!("{which} model did not converge")));
    }
    Ok(())
}

pub fn lrt(small: &FitResult, big: &FitResult) -> Result<LrtResult> {
    check_usable(small, "smaller")?;
    check_usable(big, "larger")?;
    if small.n_obs != big.n_obs {
        return Err(Error::Comparison(format!(
            "models fitted to different data ({} vs {} observations)",
            small.n_obs, big.n_obs
        )));
    }
    if big.n_params <= small.n_params {
        return Err(Error::Comparison(format!(
            "larger model has {} parameters, smaller has {}",
            big.n_params, small.n_params
        )));
    }
    lrt_from_loglik(small.loglik, big.loglik, big.n_params - small.n_params)
}

/// `k·ln(n) − 2ℓ`; lower is better.
pub fn bic(fit: &FitResult) -> f64 {
    bic_from(fit.n_params, fit.n_obs, fit.loglik)
}

fn bic_from(k: usize, n: usize, loglik: f64) -> f64 {
    if k == 0 {
        return -2.0 * loglik;
    }
    k as f64 * (n as f64).ln() - 2.0 * loglik
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub delta_loglik: f64,
    pub chi2: f64,
    pub df: usize,
    pub p: f64,
    pub bic_small: f64,
    pub bic_big: f64,
    /// `BIC(big) − BIC(small)`; negative favours the larger model.
    pub delta_bic: f64,
    /// `"small"` or `"big"`, whichever has the lower BIC.
    pub preferred_by_bic: String,
}

pub fn compare(small: &FitResult, big: &FitResult) -> Result<CompareReport> {
    let test = lrt(small, big)?;
    let (bs, bb) = (bic(small), bic(big));
    Ok(CompareReport {
        delta_loglik: big.loglik - small.loglik,
        chi2: test.chi2,
        df: test.df,
        p: test.p,
        bic_small: bs,
        bic_big: bb,
        delta_bic: bb - bs,
        preferred_by_bic: if bb < bs { "big" } else { "small" }.to_string(),
    })
}

impl CompareReport {
    pub fn to_text(&self) -> String {
        format!(
            "ΔLogLik = {:.4}\nχ²({}) = {:.4}, p = {:.4e}\nBIC small = {:.4}, BIC big = {:.4}, ΔBIC = {:.4} (preferred: {})\n",
            self.delta_loglik, self.df, self.chi2, self.p, self.bic_small, self.bic_big, self.delta_bic, self.preferred_by_bic
        )
    }
}
