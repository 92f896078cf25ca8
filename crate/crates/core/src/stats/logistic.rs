//! Logistic regression by iteratively reweighted least squares (Newton–Raphson).

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};

use super::design::Design;
use super::linear::{check_rank, check_weights, with_standardization};
use super::{FitResult, ModelKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticOptions {
    pub max_iterations: usize,
    /// Converged when the largest absolute score component falls below this.
    pub score_tolerance: f64,
    /// Or when the relative log-likelihood change falls below this (with a small score).
    pub loglik_tolerance: f64,
    /// A minority-class linear predictor beyond this magnitude (in the direction of its
    /// observed outcome) signals (quasi-)separation.
    pub separation_eta: f64,
    /// Starting coefficients (zeros when `None`); resampled refits start from the full-data
    /// estimate to save Newton iterations.
    pub start: Option<Vec<f64>>,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            max_iterations: 100,
            score_tolerance: 1e-8,
            loglik_tolerance: 1e-10,
            separation_eta: 30.0,
            start: None,
        }
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct State {
    eta: Vec<f64>,
    loglik: f64,
}

fn evaluate(x: &DMatrix<f64>, y: &[f64], w: &[f64], beta: &DVector<f64>) -> State {
    let eta: Vec<f64> = (x * beta).iter().copied().collect();
    let loglik = eta
        .iter()
        .zip(y)
        .zip(w)
        .map(|((&e, &yi), &wi)| wi * (yi * e - softplus(e)))
        .sum();
    State { eta, loglik }
}

/// Score `Xᵀ W (y − p)` and information `Xᵀ W diag(p(1−p)) X`.
fn derivatives(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    eta: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let (n, p) = x.shape();
    let mut resid = vec![0.0; n];
    let mut wt = vec![0.0; n];
    for i in 0..n {
        let mu = sigmoid(eta[i]);
        resid[i] = w[i] * (y[i] - mu);
        wt[i] = w[i] * mu * (1.0 - mu);
    }
    // Column-major storage: column j is a contiguous slice, which keeps the loops vectorizable.
    let col = |j: usize| &x.as_slice()[j * n..(j + 1) * n];
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(u, v)| u * v).sum() };
    let score = DVector::from_fn(p, |j, _| dot(col(j), &resid));
    let mut info = DMatrix::zeros(p, p);
    let mut weighted = vec![0.0; n];
    for j in 0..p {
        for ((t, a), b) in weighted.iter_mut().zip(col(j)).zip(&wt) {
            *t = a * b;
        }
        for k in 0..=j {
            let v = dot(&weighted, col(k));
            info[(j, k)] = v;
            info[(k, j)] = v;
        }
    }
    (score, info)
}

/// A minority-class observation predicted with certainty.
///
/// Rare-event fits legitimately push many majority-class rows to very large |η|, so only
/// the (weighted) minority class is inspected; both classes are checked on a tie.
fn saturated_minority(eta: &[f64], y: &[f64], w: &[f64], limit: f64) -> Option<f64> {
    let ones: f64 = y.iter().zip(w).map(|(a, b)| a * b).sum();
    let zeros: f64 = w.iter().sum::<f64>() - ones;
    eta.iter()
        .zip(y)
        .zip(w)
        .filter(|&(_, &wi)| wi > 0.0)
        .map(|((&e, &yi), _)| (e, yi))
        .find(|&(e, yi)| {
            (yi == 1.0 && ones <= zeros && e > limit) || (yi == 0.0 && zeros <= ones && e < -limit)
        })
        .map(|(e, _)| e)
}

pub fn fit_logistic(design: &Design, y: &[f64]) -> Result<FitResult> {
    fit_logistic_weighted(design, y, None, &LogisticOptions::default())
}

/// Logistic MLE with optional frequency weights.
pub fn fit_logistic_weighted(
    design: &Design,
    y: &[f64],
    weights: Option<&[f64]>,
    options: &LogisticOptions,
) -> Result<FitResult> {
    let n = design.n_rows();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    if let Some(bad) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!(
            "response row {bad} is not 0/1: {}",
            y[bad]
        )));
    }
    if design.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design matrix".into()));
    }
    check_weights(weights, n)?;
    check_rank(design, weights)?;
    let ones;
    let w = match weights {
        Some(w) => w,
        None => {
            ones = vec![1.0; n];
            &ones
        }
    };
    // Zero-weight rows contribute nothing; dropping them speeds up resampled fits.
    let kept: Option<Vec<usize>> = weights
        .filter(|w| w.contains(&0.0))
        .map(|w| (0..n).filter(|&i| w[i] > 0.0).collect());
    let compact;
    let (x, y, w): (&DMatrix<f64>, &[f64], &[f64]) = match &kept {
        Some(rows) => {
            compact = (
                design.x.select_rows(rows),
                rows.iter().map(|&i| y[i]).collect::<Vec<_>>(),
                rows.iter().map(|&i| w[i]).collect::<Vec<_>>(),
            );
            (&compact.0, &compact.1, &compact.2)
        }
        None => (&design.x, y, w),
    };
    let p = design.n_cols();
    let mut beta = match &options.start {
        None => DVector::zeros(p),
        Some(b) if b.len() == p => DVector::from_column_slice(b),
        Some(b) => {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: b.len(),
            })
        }
    };
    let mut state = evaluate(x, y, w, &beta);
    let mut converged = false;
    let mut iterations = 0;
    let mut max_score = f64::INFINITY;
    let mut info = DMatrix::zeros(p, p);
    while iterations < options.max_iterations {
        let (score, inf) = derivatives(x, y, w, &state.eta);
        info = inf;
        max_score = score.amax();
        if max_score < options.score_tolerance {
            converged = true;
            break;
        }
        let chol = info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Separation("information matrix is singular".into()))?;
        let step = chol.solve(&score);
        let mut scale = 1.0;
        let (next_beta, next) = loop {
            let candidate = &beta + &step * scale;
            let s = evaluate(x, y, w, &candidate);
            if s.loglik >= state.loglik - 1e-12 * state.loglik.abs() || scale < 1e-10 {
                break (candidate, s);
            }
            scale *= 0.5;
        };
        iterations += 1;
        let change = (next.loglik - state.loglik).abs() / (state.loglik.abs() + 1e-300);
        beta = next_beta;
        state = next;
        if let Some(eta) = saturated_minority(&state.eta, y, w, options.separation_eta) {
            return Err(Error::Separation(format!(
                "linear predictor reached {eta:.1} after {iterations} iterations"
            )));
        }
        if change < options.loglik_tolerance {
            let (score, inf) = derivatives(x, y, w, &state.eta);
            info = inf;
            max_score = score.amax();
            if max_score < 1e-6 {
                converged = true;
                break;
            }
        }
    }
    if !converged && state.loglik > -1e-6 {
        return Err(Error::Separation("log-likelihood approaches 0".into()));
    }
    let cov = info
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Separation("information matrix is singular at the optimum".into()))?;
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!(
            "IRLS stopped after {iterations} iterations (max |score| = {max_score:e})"
        ));
    }
    let mut extras = IndexMap::new();
    extras.insert("iterations".into(), serde_json::json!(iterations));
    extras.insert("max_abs_score".into(), serde_json::json!(max_score));
    Ok(FitResult {
        model_kind: ModelKind::Logistic,
        formula_columns: design.names.clone(),
        coefficients: design
            .names
            .iter()
            .cloned()
            .zip(beta.iter().copied())
            .collect(),
        std_errors: design
            .names
            .iter()
            .cloned()
            .zip((0..p).map(|j| cov[(j, j)].sqrt()))
            .collect(),
        loglik: state.loglik,
        n_obs: w.iter().sum::<f64>().round() as usize,
        n_params: p,
        converged,
        group_variance: None,
        residual_variance: None,
        warnings,
        extras: with_standardization(extras, design),
        fitted: (&design.x * &beta).iter().map(|&e| sigmoid(e)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn design(cols: &[(&str, Vec<f64>)]) -> Design {
        let names: Vec<&str> = cols.iter().map(|c| c.0).collect();
        let data: Vec<Vec<f64>> = cols.iter().map(|c| c.1.clone()).collect();
        Design::from_columns(&names, &data).unwrap()
    }

    #[test]
    fn intercept_only_is_the_log_odds() {
        let y = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0];
        let fit = fit_logistic(&design(&[("(Intercept)", vec![1.0; 8])]), &y).unwrap();
        let p: f64 = 5.0 / 8.0;
        let b = fit.coefficients["(Intercept)"];
        assert!((b - (p / (1.0 - p)).ln()).abs() < 1e-10, "{b}");
        assert!(fit.converged);
        // SE of the log-odds: 1 / sqrt(n p (1-p))
        let se = fit.std_errors["(Intercept)"];
        assert!(
            (se - 1.0 / (8.0 * p * (1.0 - p)).sqrt()).abs() < 1e-9,
            "{se}"
        );
    }

    #[test]
    fn separable_data_is_rejected() {
        let x = vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0];
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let err =
            fit_logistic(&design(&[("(Intercept)", vec![1.0; 6]), ("x", x)]), &y).unwrap_err();
        assert!(matches!(err, Error::Separation(_)), "{err}");
        assert!(err.to_string().contains("separation"));
    }

    #[test]
    fn rare_events_with_extreme_negative_predictors_converge() {
        // One positive per ten rows; far-away rows sit at η ≈ -40 at the optimum.
        let mut x = Vec::new();
        let mut y = Vec::new();
        for g in 0..20 {
            for k in 0..10 {
                let v = if k == 0 {
                    f64::from(g % 3) * 0.5
                } else {
                    f64::from(k) * 5.0
                };
                x.push(v);
                y.push(f64::from(u8::from(k == 0 || (k == 1 && g % 4 == 0))));
            }
        }
        let n = x.len();
        let fit = fit_logistic(&design(&[("(Intercept)", vec![1.0; n]), ("x", x)]), &y).unwrap();
        assert!(fit.converged);
        assert!(fit.fitted.iter().any(|&p| p < 1e-13));
    }

    #[test]
    fn warm_start_and_zero_weights_reach_the_same_optimum() {
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let d = design(&[("(Intercept)", vec![1.0; 7]), ("x", x)]);
        let w = [1.0, 2.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let cold = fit_logistic_weighted(&d, &y, Some(&w), &LogisticOptions::default()).unwrap();
        let options = LogisticOptions {
            start: Some(vec![-0.5, 0.3]),
            ..Default::default()
        };
        let warm = fit_logistic_weighted(&d, &y, Some(&w), &options).unwrap();
        for name in ["(Intercept)", "x"] {
            assert!((cold.coefficients[name] - warm.coefficients[name]).abs() < 1e-9);
            assert!((cold.std_errors[name] - warm.std_errors[name]).abs() < 1e-9);
        }
        assert_eq!(cold.fitted.len(), 7);
        assert!((cold.loglik - warm.loglik).abs() < 1e-12);
        let bad = LogisticOptions {
            start: Some(vec![0.0]),
            ..Default::default()
        };
        assert!(fit_logistic_weighted(&d, &y, None, &bad).is_err());
    }

    #[test]
    fn non_binary_response_and_rank_deficiency() {
        let d = design(&[("a", vec![1.0, 2.0, 3.0]), ("b", vec![2.0, 4.0, 6.0])]);
        assert!(matches!(
            fit_logistic(&d, &[0.0, 1.0, 0.0]),
            Err(Error::RankDeficient(_))
        ));
        let d = design(&[("a", vec![1.0, 2.0, 3.0])]);
        assert!(fit_logistic(&d, &[0.0, 0.5, 1.0]).is_err());
    }

    #[test]
    fn stationarity_at_convergence() {
        let mut rng = rng::stream(11, 0);
        let n = 2000;
        let x1: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                f64::from(u8::from(
                    rng.random::<f64>() < sigmoid(-0.5 + 1.2 * x1[i] - 0.8 * x2[i]),
                ))
            })
            .collect();
        let d = design(&[("(Intercept)", vec![1.0; n]), ("x1", x1), ("x2", x2)]);
        let fit = fit_logistic(&d, &y).unwrap();
        let resid: Vec<f64> = y.iter().zip(&fit.fitted).map(|(a, b)| a - b).collect();
        for j in 0..3 {
            let s: f64 = d.x.column(j).iter().zip(&resid).map(|(a, r)| a * r).sum();
            assert!(s.abs() < 1e-6, "score {j} = {s}");
        }
        for (name, truth) in [("(Intercept)", -0.5), ("x1", 1.2), ("x2", -0.8)] {
            assert!(
                (fit.coefficients[name] - truth).abs() < 3.0 * fit.std_errors[name],
                "{name}"
            );
        }
    }

    #[test]
    fn weights_equal_duplication() {
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let y = [0.0, 1.0, 0.0, 1.0, 1.0];
        let d = design(&[("(Intercept)", vec![1.0; 5]), ("x", x)]);
        let w = [1.0, 2.0, 2.0, 1.0, 0.0];
        let weighted =
            fit_logistic_weighted(&d, &y, Some(&w), &LogisticOptions::default()).unwrap();
        let dx = vec![0.0, 1.0, 1.0, 2.0, 2.0, 3.0];
        let dy = [0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let dup = fit_logistic(&design(&[("(Intercept)", vec![1.0; 6]), ("x", dx)]), &dy).unwrap();
        assert!((weighted.coefficients["x"] - dup.coefficients["x"]).abs() < 1e-9);
        assert!((weighted.loglik - dup.loglik).abs() < 1e-9);
    }
}
