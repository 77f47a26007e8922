//! JSON session manifest plus the files it references.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{payload, AttributeRow, AttributeTable, FeatureMatrix, ResponseTensor, SessionDataset};
use crate::error::{Error, Result};

pub const ATTRIBUTE_CSV_HEADER: [&str; 6] = [
    "image_index",
    "hue",
    "saturation",
    "intensity",
    "temperature",
    "contrast",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub source_tag: String,
    pub path: PathBuf,
    /// `[n_images, d]`
    pub dims: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseEntry {
    pub path: PathBuf,
    pub trial_counts: Vec<usize>,
}

/// Paths are resolved relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub session_id: String,
    pub n_images: usize,
    pub n_neurons: usize,
    pub features: Vec<FeatureEntry>,
    pub responses: ResponseEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_paths: Option<Vec<PathBuf>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes_csv: Option<PathBuf>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Load and fully validate a session from its manifest.
pub fn load_session(manifest_path: &Path) -> Result<SessionDataset> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let n = manifest.n_images;

    if manifest.responses.trial_counts.len() != n {
        return Err(Error::DimensionMismatch {
            context: format!(
                "{}: responses.trial_counts length vs n_images",
                manifest_path.display()
            ),
            expected: n,
            found: manifest.responses.trial_counts.len(),
        });
    }

    let mut features = Vec::with_capacity(manifest.features.len());
    for entry in &manifest.features {
        let path = resolve(base, &entry.path);
        let p = payload::read(&path)?;
        if p.dims.len() != 2 {
            return Err(Error::Format {
                path,
                reason: format!("feature payload must be rank 2, got dims {:?}", p.dims),
            });
        }
        for (axis, (&declared, &actual)) in entry.dims.iter().zip(&p.dims).enumerate() {
            if declared != actual {
                return Err(Error::DimensionMismatch {
                    context: format!("{} axis {axis} (manifest vs payload)", path.display()),
                    expected: declared,
                    found: actual,
                });
            }
        }
        if p.dims[0] != n {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "{}: feature rows vs the {n} images declared for responses",
                    path.display()
                ),
                expected: n,
                found: p.dims[0],
            });
        }
        let cols = p.dims[1];
        if let Some(pos) = p.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: path.display().to_string(),
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        let data = p.data.iter().map(|&v| f64::from(v)).collect();
        features.push(FeatureMatrix::new(entry.source_tag.clone(), n, cols, data)?);
    }

    let resp_path = resolve(base, &manifest.responses.path);
    let rp = payload::read(&resp_path)?;
    if rp.dims.len() != 1 {
        return Err(Error::Format {
            path: resp_path,
            reason: format!("response payload must be rank 1, got dims {:?}", rp.dims),
        });
    }
    let expected: usize = manifest.responses.trial_counts.iter().sum::<usize>() * manifest.n_neurons;
    if rp.dims[0] != expected {
        return Err(Error::DimensionMismatch {
            context: format!(
                "{}: response values vs sum(trial_counts) x n_neurons",
                resp_path.display()
            ),
            expected,
            found: rp.dims[0],
        });
    }
    let responses = ResponseTensor::new(
        manifest.n_neurons,
        manifest.responses.trial_counts.clone(),
        rp.data.iter().map(|&v| f64::from(v)).collect(),
    )
    .map_err(|e| match e {
        Error::NonFinite { context, row, col } => Error::NonFinite {
            context: format!("{}: {context}", resp_path.display()),
            row,
            col,
        },
        other => other,
    })?;

    let attributes = match &manifest.attributes_csv {
        Some(p) => Some(read_attribute_csv(&resolve(base, p), n)?),
        None => None,
    };
    let image_paths = manifest
        .image_paths
        .as_ref()
        .map(|ps| ps.iter().map(|p| resolve(base, p)).collect());

    SessionDataset::new(manifest.session_id, features, responses, attributes, image_paths)
}

fn sanitize(tag: &str) -> String {
    tag.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Write a session's payloads and manifest into `dir`; returns the manifest path.
pub fn save_session(session: &SessionDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut features = Vec::new();
    for (i, f) in session.features.values().enumerate() {
        let file = PathBuf::from(format!("features_{i}_{}.bin", sanitize(f.source_tag())));
        let data: Vec<f32> = f.data().iter().map(|&v| v as f32).collect();
        payload::write(&dir.join(&file), &[f.n_rows(), f.n_cols()], &data)?;
        features.push(FeatureEntry {
            source_tag: f.source_tag().to_string(),
            path: file,
            dims: [f.n_rows(), f.n_cols()],
        });
    }
    let resp_file = PathBuf::from("responses.bin");
    let values: Vec<f32> = session.responses.values().iter().map(|&v| v as f32).collect();
    payload::write(&dir.join(&resp_file), &[values.len()], &values)?;

    let attributes_csv = match &session.attributes {
        Some(table) => {
            let file = PathBuf::from("attributes.csv");
            write_attribute_csv(&dir.join(&file), table)?;
            Some(file)
        }
        None => None,
    };

    let manifest = Manifest {
        session_id: session.session_id.clone(),
        n_images: session.n_images(),
        n_neurons: session.n_neurons(),
        features,
        responses: ResponseEntry {
            path: resp_file,
            trial_counts: session.responses.trial_counts().to_vec(),
        },
        image_paths: session.image_paths.clone(),
        attributes_csv,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn write_attribute_csv(path: &Path, table: &AttributeTable) -> Result<()> {
    let csv_err = |source| Error::Csv {
        context: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(ATTRIBUTE_CSV_HEADER).map_err(csv_err)?;
    for (i, r) in table.rows().iter().enumerate() {
        w.write_record([
            i.to_string(),
            r.hue.to_string(),
            r.saturation.to_string(),
            r.intensity.to_string(),
            r.temperature.to_string(),
            r.contrast.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read an attribute CSV; rows may come in any order but must cover `0..n_images` once.
pub fn read_attribute_csv(path: &Path, n_images: usize) -> Result<AttributeTable> {
    let csv_err = |source| Error::Csv {
        context: path.display().to_string(),
        source,
    };
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().map(str::trim).ne(ATTRIBUTE_CSV_HEADER) {
        return Err(fmt(format!(
            "expected header {}, found {}",
            ATTRIBUTE_CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows: Vec<Option<AttributeRow>> = vec![None; n_images];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| fmt(format!("row {line}: missing column {i}")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| fmt(format!("row {line}, column {i}: {e}")))
        };
        let idx: usize = rec
            .get(0)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| fmt(format!("row {line}: bad image_index: {e}")))?;
        if idx >= n_images {
            return Err(fmt(format!("row {line}: image_index {idx} >= n_images {n_images}")));
        }
        if rows[idx].is_some() {
            return Err(fmt(format!("image_index {idx} appears twice")));
        }
        rows[idx] = Some(AttributeRow {
            hue: field(1)?,
            saturation: field(2)?,
            intensity: field(3)?,
            temperature: field(4)?,
            contrast: field(5)?,
        });
    }
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| fmt(format!("no row for image_index {i}"))))
        .collect::<Result<Vec<_>>>()?;
    AttributeTable::new(rows).map_err(|e| match e {
        Error::NonFinite { row, col, .. } => Error::NonFinite {
            context: path.display().to_string(),
            row,
            col: col + 1,
        },
        other => other,
    })
}
