//! Distribution-shift size between a train split and a test split in feature space.
//!
//! Three measures:
//! - closest cosine distance (CCD): mean over test rows of the cosine distance
//!   to the nearest train row, by exhaustive search;
//! - squared MMD: the biased V-statistic with a Gaussian RBF kernel;
//! - covariate shift: cross-validated balanced accuracy `a` of a linear
//!   train-vs-test classifier, reported as `clamp(2 (a - 0.5), 0, 1)`.

use std::fmt;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::seed;
use crate::splits::SplitAssignment;
use crate::stats;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Identical rows get exactly 0 rather than a rounding residue.
fn cosine_from_norms(u: &[f64], v: &[f64], nu: f64, nv: f64) -> f64 {
    if u == v {
        return 0.0;
    }
    (1.0 - dot(u, v) / (nu * nv)).clamp(0.0, 2.0)
}

/// `1 - u.v / (|u| |v|)`, clamped to `[0, 2]`; exactly 0 for identical vectors.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine distance operands".into(),
            expected: u.len(),
            found: v.len(),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::validation("cosine distance of a zero vector is undefined"));
    }
    Ok(cosine_from_norms(u, v, nu, nv))
}

fn check_rows(rows: &[&[f64]], which: &str) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::validation(format!("{which} set is empty")));
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n == 0.0 {
                Err(Error::validation(format!("{which} row {i} is a zero vector")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Mean over test rows of the minimum cosine distance to any train row.
pub fn ccd(train: &[&[f64]], test: &[&[f64]]) -> Result<f64> {
    let train_norms = check_rows(train, "train")?;
    let test_norms = check_rows(test, "test")?;
    let d = train[0].len();
    if let Some(bad) = train.iter().chain(test).find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            context: "ccd row width".into(),
            expected: d,
            found: bad.len(),
        });
    }
    let mins: Vec<f64> = test
        .par_iter()
        .zip(&test_norms)
        .map(|(t, &tn)| {
            train
                .iter()
                .zip(&train_norms)
                .map(|(r, &rn)| cosine_from_norms(t, r, tn, rn))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(mins.iter().sum::<f64>() / mins.len() as f64)
}

/// Gaussian kernel bandwidth: a fixed `sigma` or the median pairwise distance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Bandwidth {
    #[default]
    Median,
    Fixed(f64),
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bandwidth::Median => f.write_str("median"),
            Bandwidth::Fixed(s) => write!(f, "{s}"),
        }
    }
}

impl Serialize for Bandwidth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Median => s.serialize_str("median"),
            Bandwidth::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Bandwidth::Fixed(v)),
            Raw::Name(s) if s.eq_ignore_ascii_case("median") => Ok(Bandwidth::Median),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "bandwidth must be a number or \"median\", got \"{s}\""
            ))),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pooled rows beyond this count are strided down before taking the median distance.
const MEDIAN_HEURISTIC_MAX_ROWS: usize = 2000;

/// Median pairwise Euclidean distance over the pooled sample.
pub fn median_heuristic(train: &[&[f64]], test: &[&[f64]]) -> f64 {
    let pooled: Vec<&[f64]> = train.iter().chain(test).copied().collect();
    let stride = pooled.len().div_ceil(MEDIAN_HEURISTIC_MAX_ROWS).max(1);
    let rows: Vec<&[f64]> = pooled.into_iter().step_by(stride).collect();
    let dists: Vec<f64> = (0..rows.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let rows = &rows;
            (i + 1..rows.len()).map(move |j| sq_dist(rows[i], rows[j]).sqrt())
        })
        .collect();
    stats::median(&dists).unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mmd {
    pub mmd_squared: f64,
    pub sigma: f64,
}

fn kernel_sum(a: &[&[f64]], b: &[&[f64]], gamma: f64) -> f64 {
    let rows: Vec<f64> = a
        .par_iter()
        .map(|x| b.iter().map(|y| (-gamma * sq_dist(x, y)).exp()).sum::<f64>())
        .collect();
    rows.iter().sum()
}

/// Biased (V-statistic) squared MMD with `K(x, y) = exp(-|x - y|^2 / (2 sigma^2))`.
pub fn mmd_squared(train: &[&[f64]], test: &[&[f64]], bandwidth: Bandwidth) -> Result<Mmd> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::validation("mmd needs non-empty train and test sets"));
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => s,
        Bandwidth::Fixed(s) => return Err(Error::validation(format!("kernel bandwidth {s} must be positive"))),
        Bandwidth::Median => {
            let m = median_heuristic(train, test);
            if m > 0.0 {
                m
            } else {
                warn!("median pairwise distance is 0; falling back to sigma = 1");
                1.0
            }
        }
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let big_n = train.len() as f64;
    let small_n = test.len() as f64;
    let kxx = kernel_sum(train, train, gamma);
    let kyy = kernel_sum(test, test, gamma);
    let kxy = kernel_sum(train, test, gamma);
    Ok(Mmd {
        mmd_squared: kxx / (big_n * big_n) + kyy / (small_n * small_n) - 2.0 * kxy / (big_n * small_n),
        sigma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub folds: usize,
    /// L2 penalty on standardized weights (intercept unpenalized).
    pub l2: f64,
    pub max_iter: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            l2: 1e-2,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovariateShift {
    pub covariate_shift: f64,
    /// Cross-validated balanced accuracy of the train-vs-test classifier.
    pub accuracy: f64,
}

struct Logistic {
    beta: DVector<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Logistic {
    /// Weighted, L2-regularized logistic regression by damped Newton steps.
    /// `x` carries a trailing column of ones for the intercept.
    fn fit(x: &DMatrix<f64>, y: &[f64], w: &[f64], l2: f64, max_iter: usize) -> Self {
        let p = x.ncols();
        let mut beta = DVector::zeros(p);
        let penalty = |b: &DVector<f64>| 0.5 * l2 * b.rows(0, p - 1).norm_squared();
        let loss = |b: &DVector<f64>| {
            let z = x * b;
            let mut l = 0.0;
            for i in 0..y.len() {
                // log(1 + e^z) - y z, stable
                let zi = z[i];
                let softplus = if zi > 0.0 { zi + (-zi).exp().ln_1p() } else { zi.exp().ln_1p() };
                l += w[i] * (softplus - y[i] * zi);
            }
            l + penalty(b)
        };
        let mut current = loss(&beta);
        for _ in 0..max_iter {
            let z = x * &beta;
            let mut grad = DVector::zeros(p);
            let mut hess = DMatrix::zeros(p, p);
            for i in 0..y.len() {
                let pi = sigmoid(z[i]);
                let row = x.row(i).transpose();
                grad.axpy(w[i] * (pi - y[i]), &row, 1.0);
                hess.ger(w[i] * pi * (1.0 - pi), &row, &row, 1.0);
            }
            for j in 0..p - 1 {
                grad[j] += l2 * beta[j];
                hess[(j, j)] += l2;
            }
            // tiny ridge on the intercept keeps the Hessian definite on separable data
            hess[(p - 1, p - 1)] += 1e-10;
            let step = match hess.clone().cholesky() {
                Some(c) => c.solve(&grad),
                None => grad.clone(),
            };
            let mut t = 1.0;
            let mut improved = false;
            for _ in 0..30 {
                let cand = &beta - &step * t;
                let l = loss(&cand);
                if l <= current {
                    let gain = current - l;
                    beta = cand;
                    current = l;
                    improved = gain > 1e-12 * current.abs().max(1e-12);
                    break;
                }
                t *= 0.5;
            }
            if !improved || grad.norm() < 1e-10 {
                break;
            }
        }
        Self { beta }
    }

    fn decision(&self, row: &[f64]) -> f64 {
        let p = self.beta.len();
        row.iter().zip(self.beta.iter()).map(|(a, b)| a * b).sum::<f64>() + self.beta[p - 1]
    }
}

/// Shift size from how well a linear classifier separates train rows from test rows.
pub fn covariate_shift(train: &[&[f64]], test: &[&[f64]], seed: u64, config: ClassifierConfig) -> Result<CovariateShift> {
    let k = config.folds;
    if k < 2 {
        return Err(Error::validation("covariate shift needs at least 2 folds"));
    }
    let min_rows = (2 * k).max(10);
    if train.len() < min_rows || test.len() < min_rows {
        return Err(Error::validation(format!(
            "covariate shift needs at least {min_rows} rows per set, got {} and {}",
            train.len(),
            test.len()
        )));
    }
    let d = train[0].len();
    let rows: Vec<&[f64]> = train.iter().chain(test).copied().collect();
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            context: "covariate shift row width".into(),
            expected: d,
            found: bad.len(),
        });
    }
    let total = rows.len();
    let labels: Vec<f64> = (0..total).map(|i| if i < train.len() { 0.0 } else { 1.0 }).collect();

    // pooled standardization; constant dimensions are zeroed
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total as f64);
    let mut sd = vec![0.0; d];
    for r in &rows {
        for j in 0..d {
            sd[j] += (r[j] - mean[j]).powi(2);
        }
    }
    let inv_sd: Vec<f64> = sd
        .iter()
        .map(|s| {
            let s = (s / total as f64).sqrt();
            if s > 1e-12 {
                1.0 / s
            } else {
                0.0
            }
        })
        .collect();
    let design = DMatrix::from_fn(total, d + 1, |i, j| {
        if j == d {
            1.0
        } else {
            (rows[i][j] - mean[j]) * inv_sd[j]
        }
    });

    // stratified folds
    let mut rng = seed::rng(seed);
    let mut fold_of = vec![0usize; total];
    let mut train_idx: Vec<usize> = (0..train.len()).collect();
    let mut test_idx: Vec<usize> = (train.len()..total).collect();
    train_idx.shuffle(&mut rng);
    test_idx.shuffle(&mut rng);
    for (pos, &i) in train_idx.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    for (pos, &i) in test_idx.iter().enumerate() {
        fold_of[i] = pos % k;
    }

    let mut predicted = vec![0.0; total];
    for fold in 0..k {
        let fit_rows: Vec<usize> = (0..total).filter(|&i| fold_of[i] != fold).collect();
        let n0 = fit_rows.iter().filter(|&&i| labels[i] == 0.0).count() as f64;
        let n1 = fit_rows.len() as f64 - n0;
        let x = design.select_rows(&fit_rows);
        let y: Vec<f64> = fit_rows.iter().map(|&i| labels[i]).collect();
        // balanced class weights summing to 1
        let w: Vec<f64> = y.iter().map(|&l| if l == 0.0 { 0.5 / n0 } else { 0.5 / n1 }).collect();
        let model = Logistic::fit(&x, &y, &w, config.l2, config.max_iter);
        for i in (0..total).filter(|&i| fold_of[i] == fold) {
            let row: Vec<f64> = design.row(i).iter().take(d).copied().collect();
            predicted[i] = if model.decision(&row) > 0.0 { 1.0 } else { 0.0 };
        }
    }
    let tnr = (0..train.len()).filter(|&i| predicted[i] == 0.0).count() as f64 / train.len() as f64;
    let tpr = (train.len()..total).filter(|&i| predicted[i] == 1.0).count() as f64 / test.len() as f64;
    let accuracy = 0.5 * (tpr + tnr);
    Ok(CovariateShift {
        covariate_shift: (2.0 * (accuracy - 0.5)).clamp(0.0, 1.0),
        accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricToggles {
    pub ccd: bool,
    pub mmd: bool,
    pub cov: bool,
}

impl Default for MetricToggles {
    fn default() -> Self {
        Self {
            ccd: true,
            mmd: true,
            cov: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftMeasurement {
    pub session: String,
    pub split: String,
    pub source_tag: String,
    pub mmd_squared: Option<f64>,
    pub covariate_shift: Option<f64>,
    pub ccd: Option<f64>,
    pub bandwidth: Option<f64>,
    pub classifier_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftConfig {
    pub metrics: MetricToggles,
    pub bandwidth: Bandwidth,
    pub classifier: ClassifierConfig,
}

/// All enabled metrics for one split. Covariate shift is skipped (left `None`)
/// with a warning when either set is too small for the folds.
pub fn measure_split(
    session: &str,
    features: &FeatureMatrix,
    split: &SplitAssignment,
    config: &ShiftConfig,
    seed: u64,
) -> Result<ShiftMeasurement> {
    let train = features.rows_at(&split.train);
    let test = features.rows_at(&split.test);
    let mut m = ShiftMeasurement {
        session: session.to_string(),
        split: split.name.clone(),
        source_tag: features.source_tag().to_string(),
        mmd_squared: None,
        covariate_shift: None,
        ccd: None,
        bandwidth: None,
        classifier_accuracy: None,
    };
    if config.metrics.ccd {
        m.ccd = Some(ccd(&train, &test)?);
    }
    if config.metrics.mmd {
        let r = mmd_squared(&train, &test, config.bandwidth)?;
        m.mmd_squared = Some(r.mmd_squared);
        m.bandwidth = Some(r.sigma);
    }
    if config.metrics.cov {
        match covariate_shift(&train, &test, seed, config.classifier) {
            Ok(c) => {
                m.covariate_shift = Some(c.covariate_shift);
                m.classifier_accuracy = Some(c.accuracy);
            }
            Err(Error::Validation(msg)) => {
                warn!("session {session} split {}: covariate shift skipped: {msg}", split.name);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(m)
}
