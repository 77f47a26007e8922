//! Session data model: features, ragged trial responses, per-image attributes.
//!
//! Everything here is validated on construction; a [`SessionDataset`] that
//! exists is internally consistent and immutable for the rest of the run.

mod manifest;
pub mod payload;

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attributes::AttributeKind;
use crate::error::{Error, Result};

pub use manifest::{
    load_session, read_attribute_csv, save_session, write_attribute_csv, FeatureEntry, Manifest,
    ResponseEntry,
};

/// Row-major image × dimension feature matrix from one extractor layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    source_tag: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(source_tag: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let source_tag = source_tag.into();
        if rows < 2 || cols < 1 {
            return Err(Error::validation(format!(
                "feature matrix '{source_tag}' must have at least 2 rows and 1 column, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: format!("feature matrix '{source_tag}' element count"),
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("feature matrix '{source_tag}'"),
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self {
            source_tag,
            rows,
            cols,
            data,
        })
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Borrow the rows at `indices`, in the given order.
    pub fn rows_at(&self, indices: &[usize]) -> Vec<&[f64]> {
        indices.iter().map(|&i| self.row(i)).collect()
    }

    pub fn to_dmatrix(&self, indices: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(indices.len(), self.cols, |r, c| self.data[indices[r] * self.cols + c])
    }
}

/// Ragged per-image, per-trial, per-neuron firing rates.
///
/// Values are stored image-major; inside an image, trial-major with one value
/// per neuron for every presentation. All neurons share an image's trial count.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTensor {
    n_neurons: usize,
    trial_counts: Vec<usize>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl ResponseTensor {
    pub fn new(n_neurons: usize, trial_counts: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if n_neurons == 0 {
            return Err(Error::validation("response tensor needs at least one neuron"));
        }
        if let Some(img) = trial_counts.iter().position(|&t| t == 0) {
            return Err(Error::validation(format!("image {img} has no recorded trials")));
        }
        let mut offsets = Vec::with_capacity(trial_counts.len());
        let mut acc = 0usize;
        for &t in &trial_counts {
            offsets.push(acc);
            acc += t * n_neurons;
        }
        if values.len() != acc {
            return Err(Error::DimensionMismatch {
                context: "response values (sum of trial counts x neurons)".into(),
                expected: acc,
                found: values.len(),
            });
        }
        for (img, (&off, &t)) in offsets.iter().zip(&trial_counts).enumerate() {
            for (k, v) in values[off..off + t * n_neurons].iter().enumerate() {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::NonFinite {
                        context: format!("responses (value {v}, must be finite and >= 0; image row, neuron column)"),
                        row: img,
                        col: k % n_neurons,
                    });
                }
            }
        }
        Ok(Self {
            n_neurons,
            trial_counts,
            offsets,
            values,
        })
    }

    pub fn n_images(&self) -> usize {
        self.trial_counts.len()
    }

    pub fn n_neurons(&self) -> usize {
        self.n_neurons
    }

    pub fn trial_counts(&self) -> &[usize] {
        &self.trial_counts
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Trials of one neuron for one image.
    pub fn trials(&self, image: usize, neuron: usize) -> impl Iterator<Item = f64> + '_ {
        let off = self.offsets[image];
        (0..self.trial_counts[image]).map(move |t| self.values[off + t * self.n_neurons + neuron])
    }

    /// Per-image trial lists of one neuron over the selected images.
    pub fn neuron_trials(&self, neuron: usize, images: &[usize]) -> Vec<Vec<f64>> {
        images.iter().map(|&i| self.trials(i, neuron).collect()).collect()
    }
}

/// Arithmetic mean of the trials of every (image, neuron) cell, as an N×E matrix.
pub fn trial_average(responses: &ResponseTensor) -> DMatrix<f64> {
    let n = responses.n_images();
    let e = responses.n_neurons();
    let mut out = DMatrix::zeros(n, e);
    for img in 0..n {
        let t = responses.trial_counts[img];
        let off = responses.offsets[img];
        for trial in 0..t {
            for neuron in 0..e {
                out[(img, neuron)] += responses.values[off + trial * e + neuron];
            }
        }
        for neuron in 0..e {
            out[(img, neuron)] /= t as f64;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeRow {
    pub hue: f64,
    pub saturation: f64,
    pub intensity: f64,
    pub temperature: f64,
    pub contrast: f64,
}

impl AttributeRow {
    pub fn get(&self, kind: AttributeKind) -> f64 {
        match kind {
            AttributeKind::Hue => self.hue,
            AttributeKind::Saturation => self.saturation,
            AttributeKind::Intensity => self.intensity,
            AttributeKind::Temperature => self.temperature,
            AttributeKind::Contrast => self.contrast,
        }
    }

    fn values(&self) -> [f64; 5] {
        [self.hue, self.saturation, self.intensity, self.temperature, self.contrast]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    rows: Vec<AttributeRow>,
}

impl AttributeTable {
    pub fn new(rows: Vec<AttributeRow>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if let Some(col) = row.values().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "attribute table".into(),
                    row: i,
                    col,
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[AttributeRow] {
        &self.rows
    }

    pub fn column(&self, kind: AttributeKind) -> Vec<f64> {
        self.rows.iter().map(|r| r.get(kind)).collect()
    }
}

/// One recording session; the unit within which every model is fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionDataset {
    pub session_id: String,
    pub features: BTreeMap<String, FeatureMatrix>,
    pub responses: ResponseTensor,
    pub attributes: Option<AttributeTable>,
    pub image_paths: Option<Vec<PathBuf>>,
}

impl SessionDataset {
    pub fn new(
        session_id: impl Into<String>,
        features: Vec<FeatureMatrix>,
        responses: ResponseTensor,
        attributes: Option<AttributeTable>,
        image_paths: Option<Vec<PathBuf>>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for f in features {
            let tag = f.source_tag().to_string();
            if map.insert(tag.clone(), f).is_some() {
                return Err(Error::validation(format!("duplicate feature source_tag '{tag}'")));
            }
        }
        let s = Self {
            session_id: session_id.into(),
            features: map,
            responses,
            attributes,
            image_paths,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn n_images(&self) -> usize {
        self.responses.n_images()
    }

    pub fn n_neurons(&self) -> usize {
        self.responses.n_neurons()
    }

    pub fn feature(&self, source_tag: &str) -> Result<&FeatureMatrix> {
        self.features.get(source_tag).ok_or_else(|| {
            Error::validation(format!(
                "session '{}' has no features tagged '{source_tag}'",
                self.session_id
            ))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.session_id.trim().is_empty() {
            return Err(Error::validation("session_id must be non-empty"));
        }
        let n = self.n_images();
        for f in self.features.values() {
            if f.n_rows() != n {
                return Err(Error::DimensionMismatch {
                    context: format!(
                        "session '{}': feature rows of '{}' vs response images",
                        self.session_id,
                        f.source_tag()
                    ),
                    expected: n,
                    found: f.n_rows(),
                });
            }
        }
        if let Some(a) = &self.attributes {
            if a.len() != n {
                return Err(Error::DimensionMismatch {
                    context: format!("session '{}': attribute rows", self.session_id),
                    expected: n,
                    found: a.len(),
                });
            }
        }
        if let Some(p) = &self.image_paths {
            if p.len() != n {
                return Err(Error::DimensionMismatch {
                    context: format!("session '{}': image paths", self.session_id),
                    expected: n,
                    found: p.len(),
                });
            }
        }
        Ok(())
    }
}
