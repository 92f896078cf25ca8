//! Gaussian linear models: ordinary least squares and the random-intercept mixed model.

use std::collections::HashMap;
use std::hash::Hash;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};

use super::design::Design;
use super::{FitResult, ModelKind};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Fails with the names of columns that are linear combinations of earlier ones.
pub(crate) fn check_rank(design: &Design, weights: Option<&[f64]>) -> Result<()> {
    let x = &design.x;
    let sw: Vec<f64> = match weights {
        Some(w) => w.iter().map(|v| v.sqrt()).collect(),
        None => vec![1.0; x.nrows()],
    };
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let mut v =
            DVector::from_iterator(x.nrows(), x.column(j).iter().zip(&sw).map(|(a, s)| a * s));
        let norm0 = v.norm();
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= 1e-9 * norm0 {
            dependent.push(design.names[j].clone());
        } else {
            basis.push(v / norm);
        }
    }
    if dependent.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient(dependent))
    }
}

pub(crate) fn check_weights(weights: Option<&[f64]>, n: usize) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: w.len(),
            });
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "weights must be finite and non-negative".into(),
            ));
        }
    }
    Ok(())
}

fn check_response(design: &Design, y: &[f64]) -> Result<()> {
    if y.len() != design.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: design.n_rows(),
            found: y.len(),
        });
    }
    if let Some(bad) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("response row {bad}")));
    }
    if design.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design matrix".into()));
    }
    Ok(())
}

struct LeastSquares {
    beta: DVector<f64>,
    /// Weighted residual sum of squares.
    rss: f64,
    /// Diagonal of `(XᵀWX)⁻¹`.
    xtx_inv_diag: Vec<f64>,
}

fn least_squares(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<LeastSquares> {
    let (n, p) = x.shape();
    let sw: Vec<f64> = match weights {
        Some(w) => w.iter().map(|v| v.sqrt()).collect(),
        None => vec![1.0; n],
    };
    let xs = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * sw[i]);
    let mut ys = DVector::from_iterator(n, y.iter().zip(&sw).map(|(a, s)| a * s));
    let qr = xs.qr();
    qr.q_tr_mul(&mut ys);
    let r = qr.r();
    let beta = r
        .solve_upper_triangular(&ys.rows(0, p).into_owned())
        .ok_or_else(|| Error::RankDeficient(vec!["(singular triangular factor)".into()]))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::RankDeficient(vec!["(singular triangular factor)".into()]))?;
    let xtx_inv_diag = (0..p).map(|i| r_inv.row(i).norm_squared()).collect();
    let fitted = x * &beta;
    let rss = (0..n)
        .map(|i| (y[i] - fitted[i]).powi(2) * sw[i] * sw[i])
        .sum();
    Ok(LeastSquares {
        beta,
        rss,
        xtx_inv_diag,
    })
}

fn gaussian_loglik(n: f64, rss: f64) -> f64 {
    -0.5 * n * (LN_2PI + (rss / n).ln() + 1.0)
}

pub fn fit_ols(design: &Design, y: &[f64]) -> Result<FitResult> {
    fit_ols_weighted(design, y, None)
}

/// Weighted least squares with frequency weights (a weight of `k` counts a row `k` times).
pub fn fit_ols_weighted(design: &Design, y: &[f64], weights: Option<&[f64]>) -> Result<FitResult> {
    check_response(design, y)?;
    check_weights(weights, y.len())?;
    check_rank(design, weights)?;
    let p = design.n_cols();
    let n = weights.map_or(y.len() as f64, |w| w.iter().sum());
    let ls = least_squares(&design.x, y, weights)?;
    let sigma2 = ls.rss / n;
    let s2 = if n > p as f64 {
        ls.rss / (n - p as f64)
    } else {
        f64::NAN
    };
    let mut extras = IndexMap::new();
    extras.insert("sigma2_unbiased".into(), serde_json::json!(s2));
    Ok(FitResult {
        model_kind: ModelKind::Ols,
        formula_columns: design.names.clone(),
        coefficients: design
            .names
            .iter()
            .cloned()
            .zip(ls.beta.iter().copied())
            .collect(),
        std_errors: design
            .names
            .iter()
            .cloned()
            .zip(ls.xtx_inv_diag.iter().map(|d| (s2 * d).sqrt()))
            .collect(),
        loglik: gaussian_loglik(n, ls.rss),
        n_obs: n.round() as usize,
        n_params: p + 1,
        converged: true,
        group_variance: None,
        residual_variance: Some(sigma2),
        warnings: Vec::new(),
        extras: with_standardization(extras, design),
        fitted: (&design.x * &ls.beta).iter().copied().collect(),
    })
}

pub(crate) fn with_standardization(
    mut extras: IndexMap<String, serde_json::Value>,
    design: &Design,
) -> IndexMap<String, serde_json::Value> {
    if !design.standardization.is_empty() {
        extras.insert(
            "standardization".into(),
            serde_json::json!(design.standardization),
        );
    }
    extras
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmOptions {
    /// Grid resolution over the variance fraction `τ = λ / (1 + λ)` before refinement.
    pub grid_points: usize,
    /// Absolute tolerance on `τ` for the golden-section refinement.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LmmOptions {
    fn default() -> Self {
        LmmOptions {
            grid_points: 40,
            tolerance: 1e-10,
            max_iterations: 200,
        }
    }
}

const TAU_MAX: f64 = 1.0 - 1e-6;

struct Profile {
    loglik: f64,
    ls: LeastSquares,
    n: f64,
}

/// Group structure: row → group index, and group sizes.
struct Groups {
    of_row: Vec<usize>,
    sizes: Vec<f64>,
}

impl Groups {
    fn new<G: Hash + Eq + Clone>(groups: &[G]) -> Self {
        let mut index: HashMap<G, usize> = HashMap::new();
        let mut sizes = Vec::new();
        let of_row = groups
            .iter()
            .map(|g| {
                let k = *index.entry(g.clone()).or_insert_with(|| {
                    sizes.push(0.0);
                    sizes.len() - 1
                });
                sizes[k] += 1.0;
                k
            })
            .collect();
        Groups { of_row, sizes }
    }

    fn sums(&self, values: impl Iterator<Item = f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.sizes.len()];
        for (v, &g) in values.zip(&self.of_row) {
            out[g] += v;
        }
        out
    }
}

/// Profiled log-likelihood at variance ratio `λ = σ²_group / σ²`: the data are multiplied by
/// `V^{-1/2}` (per group, `I − d_g·11ᵀ` with `d_g·n_g = 1 − (1 + λ n_g)^{-1/2}`), which turns
/// the generalized least-squares problem into an ordinary one.
fn profile(x: &DMatrix<f64>, y: &[f64], groups: &Groups, lambda: f64) -> Result<Profile> {
    let (n, p) = x.shape();
    let shrink: Vec<f64> = groups
        .sizes
        .iter()
        .map(|&ng| (1.0 - 1.0 / (1.0 + lambda * ng).sqrt()) / ng)
        .collect();
    let mut xt = x.clone();
    if lambda > 0.0 {
        for j in 0..p {
            let sums = groups.sums(x.column(j).iter().copied());
            for i in 0..n {
                let g = groups.of_row[i];
                xt[(i, j)] -= shrink[g] * sums[g];
            }
        }
    }
    let yt: Vec<f64> = if lambda > 0.0 {
        let sums = groups.sums(y.iter().copied());
        y.iter()
            .zip(&groups.of_row)
            .map(|(v, &g)| v - shrink[g] * sums[g])
            .collect()
    } else {
        y.to_vec()
    };
    let ls = least_squares(&xt, &yt, None)?;
    let n = n as f64;
    let logdet: f64 = groups
        .sizes
        .iter()
        .map(|&ng| (1.0 + lambda * ng).ln())
        .sum();
    Ok(Profile {
        loglik: gaussian_loglik(n, ls.rss) - 0.5 * logdet,
        ls,
        n,
    })
}

fn lambda_of(tau: f64) -> f64 {
    tau / (1.0 - tau)
}

/// Maximum-likelihood random-intercept model `y = Xβ + b_group + ε`.
pub fn fit_lmm_random_intercept<G: Hash + Eq + Clone>(
    design: &Design,
    y: &[f64],
    groups: &[G],
    options: &LmmOptions,
) -> Result<FitResult> {
    check_response(design, y)?;
    if groups.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            found: groups.len(),
        });
    }
    let grouping = Groups::new(groups);
    if grouping.sizes.len() < 2 {
        let mut fit = fit_ols(design, y)?;
        fit.warnings
            .push("fewer than two groups: random intercept not identifiable, fitted by OLS".into());
        return Ok(fit);
    }
    check_rank(design, None)?;
    let x = &design.x;
    let mut evaluations = 0usize;
    let mut eval = |tau: f64| -> Result<f64> {
        evaluations += 1;
        Ok(profile(x, y, &grouping, lambda_of(tau))?.loglik)
    };

    // Coarse grid over τ, then golden-section refinement around the best grid point.
    let k = options.grid_points.max(4);
    let grid: Vec<f64> = (0..=k).map(|i| TAU_MAX * i as f64 / k as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&t| eval(t)).collect::<Result<_>>()?;
    let best = (0..values.len())
        .max_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("grid is non-empty");
    let (mut lo, mut hi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(k)]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - phi * (hi - lo);
    let mut b = lo + phi * (hi - lo);
    let (mut fa, mut fb) = (eval(a)?, eval(b)?);
    let mut iterations = 0;
    while hi - lo > options.tolerance && iterations < options.max_iterations {
        if fa >= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - phi * (hi - lo);
            fa = eval(a)?;
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + phi * (hi - lo);
            fb = eval(b)?;
        }
        iterations += 1;
    }
    let mut candidates = [(grid[best], values[best]), (a, fa), (b, fb)];
    candidates.sort_by(|p, q| q.1.total_cmp(&p.1));
    let (mut tau, mut ll) = candidates[0];
    let mut warnings = Vec::new();
    // Boundary: no variance ratio improves on the no-group-effect fit.
    if values[0] >= ll - 1e-10 {
        tau = 0.0;
        ll = values[0];
    }
    let converged = hi - lo <= options.tolerance && tau < TAU_MAX * (1.0 - 1e-3);
    if !converged {
        warnings.push(format!(
            "variance-ratio search did not converge (τ = {tau})"
        ));
    }
    let lambda = lambda_of(tau);
    let fit = profile(x, y, &grouping, lambda)?;
    debug_assert!((fit.loglik - ll).abs() < 1e-6);
    let sigma2 = fit.ls.rss / fit.n;
    let mut extras = IndexMap::new();
    extras.insert("variance_ratio".into(), serde_json::json!(lambda));
    extras.insert("n_groups".into(), serde_json::json!(grouping.sizes.len()));
    extras.insert("evaluations".into(), serde_json::json!(evaluations));
    extras.insert("estimation".into(), serde_json::json!("ML"));
    Ok(FitResult {
        model_kind: ModelKind::LmmRi,
        formula_columns: design.names.clone(),
        coefficients: design
            .names
            .iter()
            .cloned()
            .zip(fit.ls.beta.iter().copied())
            .collect(),
        std_errors: design
            .names
            .iter()
            .cloned()
            .zip(fit.ls.xtx_inv_diag.iter().map(|d| (sigma2 * d).sqrt()))
            .collect(),
        loglik: fit.loglik,
        n_obs: y.len(),
        n_params: design.n_cols() + 2,
        converged,
        group_variance: Some(lambda * sigma2),
        residual_variance: Some(sigma2),
        warnings,
        extras: with_standardization(extras, design),
        fitted: (x * &fit.ls.beta).iter().copied().collect(),
    })
}
