//! Ridge regression from standardized features, with k-fold selection of the
//! penalty.
//!
//! Features are standardized with train-set means and population standard
//! deviations; zero-variance dimensions are left out of the solve and carry a
//! weight of 0. The response is centered and the intercept is its train mean.
//! Weights are stored in standardized units.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::pearson;

/// Relative eigenvalue below which an unpenalized system counts as singular.
const SINGULAR_RTOL: f64 = 1e-10;

/// Nine values, `1e-3, 1e-2, ..., 1e5`.
pub fn default_lambda_grid() -> Vec<f64> {
    (-3..=5).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub feature_mean: Vec<f64>,
    /// Per-dimension population sd; 1 for constant dimensions.
    pub feature_scale: Vec<f64>,
    /// Mean held-out Pearson r of the selected penalty; `None` for a direct fit.
    pub cv_r: Option<f64>,
}

impl RidgeModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                self.intercept
                    + (0..x.ncols())
                        .map(|j| self.weights[j] * (x[(i, j)] - self.feature_mean[j]) / self.feature_scale[j])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Weights in raw feature units.
    pub fn raw_coefficients(&self) -> Vec<f64> {
        self.weights.iter().zip(&self.feature_scale).map(|(w, s)| w / s).collect()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub active: Vec<usize>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>, rows: &[usize]) -> Self {
        let d = x.ncols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        let mut scale = vec![1.0; d];
        let mut active = Vec::with_capacity(d);
        for j in 0..d {
            let m = rows.iter().map(|&i| x[(i, j)]).sum::<f64>() / n;
            let var = rows.iter().map(|&i| (x[(i, j)] - m).powi(2)).sum::<f64>() / n;
            mean[j] = m;
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + m.abs()) {
                scale[j] = sd;
                active.push(j);
            }
        }
        Self { mean, scale, active }
    }

    /// Standardized active columns of the selected rows.
    pub fn transform(&self, x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.active.len(), |r, c| {
            let j = self.active[c];
            (x[(rows[r], j)] - self.mean[j]) / self.scale[j]
        })
    }
}

fn column_mean(y: &DMatrix<f64>, col: usize, rows: &[usize]) -> f64 {
    rows.iter().map(|&i| y[(i, col)]).sum::<f64>() / rows.len() as f64
}

fn is_constant(y: &DMatrix<f64>, col: usize, rows: &[usize]) -> bool {
    let first = y[(rows[0], col)];
    rows.iter().all(|&i| y[(i, col)] == first)
}

/// Solve the penalized normal equations for every column of `yc` at once.
fn solve_weights(z: &DMatrix<f64>, yc: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if lambda > 0.0 {
        let mut gram = z.transpose() * z;
        for k in 0..gram.nrows() {
            gram[(k, k)] += lambda;
        }
        let rhs = z.transpose() * yc;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::validation(format!("ridge system not positive definite at lambda {lambda}")))?;
        Ok(chol.solve(&rhs))
    } else {
        // minimum-norm least squares
        let svd = z.clone().svd(true, true);
        let tol = SINGULAR_RTOL * svd.singular_values.max() * (z.nrows().max(z.ncols()) as f64);
        svd.solve(yc, tol.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::validation(format!("least squares solve failed: {e}")))
    }
}

fn embed(weights_active: &[f64], active: &[usize], d: usize) -> Vec<f64> {
    let mut w = vec![0.0; d];
    for (k, &j) in active.iter().enumerate() {
        w[j] = weights_active[k];
    }
    w
}

/// Ridge fit at one fixed penalty. `lambda = 0` gives the minimum-norm
/// least-squares solution.
pub fn fit_fixed(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<RidgeModel> {
    let ym = DMatrix::from_column_slice(y.len(), 1, y);
    fit_fixed_multi(x, &ym, lambda)?.pop().expect("one column")
}

fn check_inputs(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch {
            context: "ridge rows (features vs responses)".into(),
            expected: x.nrows(),
            found: y.nrows(),
        });
    }
    if x.nrows() < 2 {
        return Err(Error::validation("ridge needs at least 2 rows"));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::validation(format!("ridge penalty {lambda} must be finite and >= 0")));
    }
    Ok(())
}

/// Fixed-penalty fit for every response column; constant columns yield
/// [`Error::UntunableNeuron`].
pub fn fit_fixed_multi(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<Vec<Result<RidgeModel>>> {
    check_inputs(x, y)?;
    check_lambda(lambda)?;
    let rows: Vec<usize> = (0..x.nrows()).collect();
    let std = Standardizer::fit(x, &rows);
    let z = std.transform(x, &rows);
    let means: Vec<f64> = (0..y.ncols()).map(|c| column_mean(y, c, &rows)).collect();
    let yc = DMatrix::from_fn(y.nrows(), y.ncols(), |i, c| y[(i, c)] - means[c]);
    let w = if std.active.is_empty() {
        DMatrix::zeros(0, y.ncols())
    } else {
        solve_weights(&z, &yc, lambda)?
    };
    Ok((0..y.ncols())
        .map(|c| {
            if is_constant(y, c, &rows) {
                return Err(Error::UntunableNeuron);
            }
            let col: Vec<f64> = w.column(c).iter().copied().collect();
            Ok(RidgeModel {
                weights: embed(&col, &std.active, x.ncols()),
                intercept: means[c],
                lambda,
                feature_mean: std.mean.clone(),
                feature_scale: std.scale.clone(),
                cv_r: None,
            })
        })
        .collect())
}

/// Mean held-out Pearson r per (penalty, response column); `None` rows mark
/// penalties skipped as singular.
fn cv_scores(x: &DMatrix<f64>, y: &DMatrix<f64>, grid: &[f64], folds: usize) -> Vec<Option<Vec<f64>>> {
    let n = x.nrows();
    let e = y.ncols();
    let mut totals: Vec<Option<Vec<f64>>> = grid.iter().map(|_| Some(vec![0.0; e])).collect();
    for fold in 0..folds {
        let fit_rows: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
        let val_rows: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
        let std = Standardizer::fit(x, &fit_rows);
        let z = std.transform(x, &fit_rows);
        let zv = std.transform(x, &val_rows);
        let means: Vec<f64> = (0..e).map(|c| column_mean(y, c, &fit_rows)).collect();
        let yc = DMatrix::from_fn(fit_rows.len(), e, |r, c| y[(fit_rows[r], c)] - means[c]);
        let p = z.ncols();
        let (vecs, vals, proj) = if p > 0 {
            let eig = SymmetricEigen::new(z.transpose() * &z);
            let proj = eig.eigenvectors.transpose() * (z.transpose() * &yc);
            (eig.eigenvectors, eig.eigenvalues, proj)
        } else {
            (DMatrix::zeros(0, 0), DVector::zeros(0), DMatrix::zeros(0, e))
        };
        let q = &zv * &vecs;
        let max_eig = vals.iter().cloned().fold(0.0, f64::max);
        let min_eig = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        for (g, &lambda) in grid.iter().enumerate() {
            let Some(total) = totals[g].as_mut() else { continue };
            if lambda == 0.0 && p > 0 && min_eig <= SINGULAR_RTOL * max_eig {
                warn!("lambda = 0 is singular on a cross-validation fold; skipping it");
                totals[g] = None;
                continue;
            }
            let mut scaled = proj.clone();
            for k in 0..p {
                let f = 1.0 / (vals[k] + lambda);
                scaled.row_mut(k).scale_mut(f);
            }
            let pred = &q * scaled;
            for c in 0..e {
                let pc: Vec<f64> = pred.column(c).iter().map(|v| v + means[c]).collect();
                let yv: Vec<f64> = val_rows.iter().map(|&i| y[(i, c)]).collect();
                total[c] += pearson(&pc, &yv).unwrap_or(0.0) / folds as f64;
            }
        }
    }
    totals
}

/// Select the penalty per response column by k-fold cross-validated Pearson r
/// (ties go to the larger penalty), then refit on all rows.
///
/// Folds are interleaved: row `i` is held out in fold `i % folds`.
pub fn fit_ridge_multi(x: &DMatrix<f64>, y: &DMatrix<f64>, grid: &[f64], folds: usize) -> Result<Vec<Result<RidgeModel>>> {
    check_inputs(x, y)?;
    if grid.is_empty() {
        return Err(Error::validation("empty lambda grid"));
    }
    for &l in grid {
        check_lambda(l)?;
    }
    if folds < 2 || x.nrows() < folds {
        return Err(Error::validation(format!(
            "need rows ({}) >= folds ({folds}) >= 2",
            x.nrows()
        )));
    }
    let scores = cv_scores(x, y, grid, folds);
    if scores.iter().all(Option::is_none) {
        return Err(Error::validation("every lambda in the grid was singular"));
    }
    let mut chosen: Vec<(f64, f64)> = Vec::with_capacity(y.ncols());
    for c in 0..y.ncols() {
        let mut best: Option<(f64, f64)> = None;
        for (g, &lambda) in grid.iter().enumerate() {
            let Some(s) = &scores[g] else { continue };
            let r = s[c];
            best = match best {
                Some((bl, br)) if r < br || (r == br && lambda <= bl) => Some((bl, br)),
                _ => Some((lambda, r)),
            };
        }
        chosen.push(best.expect("at least one usable lambda"));
    }

    let mut out: Vec<Option<Result<RidgeModel>>> = (0..y.ncols()).map(|_| None).collect();
    let mut distinct: Vec<f64> = chosen.iter().map(|c| c.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    for lambda in distinct {
        let cols: Vec<usize> = (0..y.ncols()).filter(|&c| chosen[c].0 == lambda).collect();
        let sub = DMatrix::from_fn(y.nrows(), cols.len(), |i, k| y[(i, cols[k])]);
        let fits = fit_fixed_multi(x, &sub, lambda)?;
        for (k, fit) in fits.into_iter().enumerate() {
            let c = cols[k];
            out[c] = Some(fit.map(|mut m| {
                m.cv_r = Some(chosen[c].1);
                m
            }));
        }
    }
    Ok(out.into_iter().map(|o| o.expect("every column fitted")).collect())
}

/// Single-response ridge with cross-validated penalty selection.
pub fn fit_ridge(x: &DMatrix<f64>, y: &[f64], grid: &[f64], folds: usize) -> Result<RidgeModel> {
    let ym = DMatrix::from_column_slice(y.len(), 1, y);
    fit_ridge_multi(x, &ym, grid, folds)?.pop().expect("one column")
}
