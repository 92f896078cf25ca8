//! Percentile bootstrap intervals by case resampling.
//!
//! Resampling is over units (rows, or clusters of rows such as all candidate rows of one
//! frame): each replicate draws `n_units` units with replacement and passes the resulting
//! multiplicities to the fitter as frequency weights. Replicate `b` uses RNG stream `b` of the
//! seed, so intervals do not depend on thread scheduling.

use indexmap::IndexMap;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FitResult;
use crate::error::{Error, Result};
use crate::rng;

/// Resamples per interval unless configured otherwise.
pub const DEFAULT_N_SIMS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub level: f64,
    pub intervals: IndexMap<String, Interval>,
    pub successes: usize,
    /// `(replicate, error)` for every failed resample fit.
    pub failures: Vec<(usize, String)>,
    pub warnings: Vec<String>,
}

/// Linear-interpolation quantile of sorted data (the "type 7" definition).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile intervals at `level` for every coefficient returned by `fitter`.
///
/// `unit_of_row[i]` names the resampling unit of row `i` (`0..n_units`); `fitter` receives one
/// weight per row.
pub fn bootstrap_ci<F>(
    fitter: F,
    unit_of_row: &[usize],
    n_sims: usize,
    seed: u64,
    level: f64,
) -> Result<BootstrapResult>
where
    F: Fn(&[f64]) -> Result<FitResult> + Sync,
{
    if n_sims == 0 {
        return Err(Error::InvalidArgument(
            "bootstrap needs at least one simulation".into(),
        ));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let n_units = unit_of_row.iter().max().map_or(0, |m| m + 1);
    if n_units == 0 {
        return Err(Error::InvalidArgument("no rows to resample".into()));
    }
    let replicates: Vec<Result<IndexMap<String, f64>>> = (0..n_sims)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(seed, b as u64);
            let mut counts = vec![0.0; n_units];
            for _ in 0..n_units {
                counts[rng.random_range(0..n_units)] += 1.0;
            }
            let weights: Vec<f64> = unit_of_row.iter().map(|&u| counts[u]).collect();
            let fit = fitter(&weights)?;
            if !fit.converged {
                return Err(Error::Comparison("resample fit did not converge".into()));
            }
            Ok(fit.coefficients)
        })
        .collect();

    let mut draws: IndexMap<String, Vec<f64>> = IndexMap::new();
    let mut failures = Vec::new();
    for (b, r) in replicates.into_iter().enumerate() {
        match r {
            Ok(coefs) => {
                for (name, v) in coefs {
                    draws.entry(name).or_default().push(v);
                }
            }
            Err(e) => failures.push((b, e.to_string())),
        }
    }
    let successes = n_sims - failures.len();
    if successes == 0 {
        return Err(Error::Comparison(format!(
            "all {n_sims} bootstrap fits failed"
        )));
    }
    let mut warnings = Vec::new();
    if (successes as f64) < 0.95 * n_sims as f64 {
        warnings.push(format!(
            "only {successes} of {n_sims} resample fits succeeded; interval coverage may be off"
        ));
    }
    let alpha = (1.0 - level) / 2.0;
    let intervals = draws
        .into_iter()
        .map(|(name, mut v)| {
            v.sort_by(f64::total_cmp);
            let iv = Interval {
                lower: percentile(&v, alpha),
                upper: percentile(&v, 1.0 - alpha),
            };
            (name, iv)
        })
        .collect();
    Ok(BootstrapResult {
        level,
        intervals,
        successes,
        failures,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{fit_ols_weighted, Design};

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 0.125), 1.5);
        assert_eq!(percentile(&v, 1.0), 5.0);
    }

    #[test]
    fn noiseless_data_gives_zero_width() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.5 * v).collect();
        let d = Design::from_columns(&["(Intercept)", "x"], &[vec![1.0; 20], x]).unwrap();
        let units: Vec<usize> = (0..20).collect();
        let res =
            bootstrap_ci(|w| fit_ols_weighted(&d, &y, Some(w)), &units, 200, 9, 0.95).unwrap();
        for iv in res.intervals.values() {
            assert!(iv.width() < 1e-9, "{iv:?}");
        }
        assert!(res.failures.is_empty());
    }

    #[test]
    fn failures_are_recorded_and_warned() {
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        let y = vec![0.1, 0.9, 2.2, 2.8, 4.1, 5.0];
        let d = Design::from_columns(&["(Intercept)", "x"], &[vec![1.0; 6], x]).unwrap();
        let units: Vec<usize> = (0..6).collect();
        // Six units: some resamples keep a single distinct x value and become rank-deficient.
        let res = bootstrap_ci(|w| fit_ols_weighted(&d, &y, Some(w)), &units, 400, 1, 0.9).unwrap();
        assert_eq!(res.successes + res.failures.len(), 400);
        let again =
            bootstrap_ci(|w| fit_ols_weighted(&d, &y, Some(w)), &units, 400, 1, 0.9).unwrap();
        assert_eq!(res, again);
        assert!(bootstrap_ci(|w| fit_ols_weighted(&d, &y, Some(w)), &units, 0, 1, 0.9).is_err());
    }
}
