//! Per-neuron linear encoding models and ceiling-normalized predictivity.
//!
//! A neuron's score is `r_pred^2 / r_cons^2`: the squared Pearson correlation
//! between predictions and trial-averaged test responses, divided by the
//! squared Spearman-Brown corrected split-half consistency.

mod ceiling;
mod ridge;

use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{trial_average, SessionDataset};
use crate::error::{Error, Result};
use crate::seed;
use crate::splits::SplitAssignment;
use crate::stats::pearson;

pub use ceiling::{ceiling, spearman_brown, Ceiling};
pub use ridge::{default_lambda_grid, fit_fixed, fit_fixed_multi, fit_ridge, fit_ridge_multi, RidgeModel};

/// Which images' trials feed the noise ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeilingSource {
    #[default]
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    pub ceiling_repeats: usize,
    /// Neurons with `r_cons` below this are unreliable and get no score.
    pub ceiling_floor: f64,
    pub ceiling_source: CeilingSource,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            lambda_grid: default_lambda_grid(),
            folds: 5,
            ceiling_repeats: 20,
            ceiling_floor: 0.1,
            ceiling_source: CeilingSource::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// Predictions or responses have zero variance over the test images.
    Degenerate,
    /// Ceiling below the floor, or undefined.
    Unreliable,
    /// `r_pred < 0`; the score still squares it.
    NegativeR,
    /// Zero-variance training responses.
    Untunable,
    /// Any other per-neuron failure.
    FitFailed,
}

impl Flag {
    pub fn name(self) -> &'static str {
        match self {
            Flag::Degenerate => "degenerate",
            Flag::Unreliable => "unreliable",
            Flag::NegativeR => "negative_r",
            Flag::Untunable => "untunable",
            Flag::FitFailed => "fit_failed",
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingResult {
    pub neuron: usize,
    pub lambda: Option<f64>,
    pub r_pred: Option<f64>,
    pub r_cons: Option<f64>,
    pub score: Option<f64>,
    pub flags: Vec<Flag>,
}

impl EncodingResult {
    /// Has a score and counts toward session medians.
    pub fn is_reliable(&self) -> bool {
        self.score.is_some()
    }

    fn failed(neuron: usize, flag: Flag) -> Self {
        Self {
            neuron,
            lambda: None,
            r_pred: None,
            r_cons: None,
            score: None,
            flags: vec![flag],
        }
    }
}

/// Score a fitted model on test images against a precomputed ceiling.
pub fn score_neuron(
    neuron: usize,
    model: &RidgeModel,
    x_test: &DMatrix<f64>,
    y_test: &[f64],
    ceiling: Ceiling,
    floor: f64,
) -> Result<EncodingResult> {
    if x_test.nrows() != y_test.len() {
        return Err(Error::DimensionMismatch {
            context: "test features vs responses".into(),
            expected: x_test.nrows(),
            found: y_test.len(),
        });
    }
    if y_test.len() < 3 {
        return Err(Error::validation(format!("scoring needs at least 3 test images, got {}", y_test.len())));
    }
    let pred = model.predict(x_test);
    let mut flags = Vec::new();
    let r_pred = match pearson(&pred, y_test) {
        Some(r) => r,
        None => {
            flags.push(Flag::Degenerate);
            0.0
        }
    };
    if r_pred < 0.0 {
        flags.push(Flag::NegativeR);
    }
    let score = match ceiling.r_cons {
        Some(c) if c >= floor && c > 0.0 => Some(r_pred * r_pred / (c * c)),
        _ => {
            flags.push(Flag::Unreliable);
            None
        }
    };
    Ok(EncodingResult {
        neuron,
        lambda: Some(model.lambda),
        r_pred: Some(r_pred),
        r_cons: ceiling.r_cons,
        score,
        flags,
    })
}

/// Fit and score every neuron of a session on one split.
///
/// Per-neuron failures come back as flagged results; only session-level
/// problems (bad split, missing features, unusable grid) are errors.
pub fn fit_session(
    session: &SessionDataset,
    split: &SplitAssignment,
    source_tag: &str,
    config: &EncoderConfig,
    seed: u64,
) -> Result<Vec<EncodingResult>> {
    split.validate(session.n_images())?;
    let features = session.feature(source_tag)?;
    let averages = trial_average(&session.responses);
    let x_train = features.to_dmatrix(&split.train);
    let x_test = features.to_dmatrix(&split.test);
    let y_train = averages.select_rows(&split.train);
    let models = fit_ridge_multi(&x_train, &y_train, &config.lambda_grid, config.folds)?;

    let ceiling_images: Vec<usize> = match config.ceiling_source {
        CeilingSource::Test => split.test.clone(),
        CeilingSource::All => (0..session.n_images()).collect(),
    };

    Ok(models
        .into_par_iter()
        .enumerate()
        .map(|(neuron, model)| {
            let model = match model {
                Ok(m) => m,
                Err(Error::UntunableNeuron) => return EncodingResult::failed(neuron, Flag::Untunable),
                Err(e) => {
                    log::warn!("session {} neuron {neuron}: {e}", session.session_id);
                    return EncodingResult::failed(neuron, Flag::FitFailed);
                }
            };
            let y_test: Vec<f64> = split.test.iter().map(|&i| averages[(i, neuron)]).collect();
            let trials = session.responses.neuron_trials(neuron, &ceiling_images);
            let ceiling_seed = seed::derive(seed, &["ceiling", &neuron.to_string()]);
            let result = ceiling(&trials, config.ceiling_repeats, ceiling_seed)
                .and_then(|c| score_neuron(neuron, &model, &x_test, &y_test, c, config.ceiling_floor));
            match result {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("session {} neuron {neuron}: {e}", session.session_id);
                    let mut r = EncodingResult::failed(neuron, Flag::FitFailed);
                    r.lambda = Some(model.lambda);
                    r
                }
            }
        })
        .collect())
}
