//! Synthetic sessions with known ground truth.
//!
//! Features come from a Gaussian mixture on a low-dimensional latent space,
//! embedded linearly into feature space with a little isotropic noise. The
//! mixture means lie along an arc, so distance from any image grows smoothly
//! across components.
//!
//! Each image is a two-tone pattern whose two 8-bit colors are squashed random
//! projections of the image's features, so attribute hold-outs are also shifts
//! in feature space. Neuron
//! means are either a linear map of the features or a fixed random two-layer
//! `tanh` network; every trial adds Gaussian noise.
//!
//! All payload values are rounded to `f32` at generation so a save/load round
//! trip is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attributes::Raster;
use crate::data::{save_session, AttributeRow, AttributeTable, FeatureMatrix, ResponseTensor, SessionDataset};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GroundTruthKind {
    Linear,
    Nonlinear {
        hidden: usize,
        /// Standard deviation of hidden pre-activations over the sample.
        #[serde(default = "default_gain")]
        gain: f64,
    },
}

fn default_gain() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageMode {
    ProceduralRasters,
    FeaturesOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseSigma {
    Constant(f64),
    PerNeuron(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_session_id")]
    pub session_id: String,
    pub n_images: usize,
    pub d: usize,
    pub n_neurons: usize,
    pub trials_per_image: usize,
    /// Each image gets `trials_per_image + U{0..=extra_trials}` trials.
    #[serde(default)]
    pub extra_trials: usize,
    pub ground_truth: GroundTruthKind,
    pub noise_sigma: NoiseSigma,
    pub image_mode: ImageMode,
    #[serde(default = "default_components")]
    pub components: usize,
    /// Norm of every mixture mean, in units of `sqrt(d)` times the unit
    /// within-component spread.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Mixture means sit evenly along a circular arc of this many degrees, so
    /// the angle between images varies smoothly from component to component.
    #[serde(default = "default_arc_degrees")]
    pub arc_degrees: f64,
    /// Dimension of the latent space holding the mixture; `None` draws the
    /// mixture directly in feature space.
    #[serde(default)]
    pub latent_dim: Option<usize>,
    /// Isotropic feature-space noise added after the latent embedding.
    #[serde(default = "default_ambient_noise")]
    pub ambient_noise: f64,
    /// Component standard deviations are log-uniform in
    /// `[1 / spread_ratio, spread_ratio]`.
    #[serde(default = "default_spread_ratio")]
    pub spread_ratio: f64,
    #[serde(default = "default_source_tag")]
    pub source_tag: String,
    /// Across-image standard deviation of every neuron's mean response.
    #[serde(default = "default_signal_sd")]
    pub signal_sd: f64,
    #[serde(default = "default_baseline")]
    pub baseline: f64,
    /// Side length of procedural rasters (even).
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub seed: u64,
}

fn default_session_id() -> String {
    "synth".into()
}
fn default_components() -> usize {
    6
}
fn default_separation() -> f64 {
    3.0
}
fn default_arc_degrees() -> f64 {
    150.0
}
fn default_ambient_noise() -> f64 {
    0.3
}
fn default_spread_ratio() -> f64 {
    2.0
}
fn default_source_tag() -> String {
    "synth/features".into()
}
fn default_signal_sd() -> f64 {
    10.0
}
fn default_baseline() -> f64 {
    80.0
}
fn default_image_size() -> usize {
    16
}

impl SynthConfig {
    /// Desk-scale defaults for a misspecified (nonlinear) world.
    pub fn nonlinear(session_id: impl Into<String>, seed: u64) -> Self {
        Self {
            session_id: session_id.into(),
            n_images: 1000,
            d: 24,
            n_neurons: 40,
            trials_per_image: 4,
            extra_trials: 0,
            ground_truth: GroundTruthKind::Nonlinear {
                hidden: 32,
                gain: default_gain(),
            },
            noise_sigma: NoiseSigma::Constant(3.0),
            image_mode: ImageMode::FeaturesOnly,
            components: default_components(),
            separation: default_separation(),
            arc_degrees: default_arc_degrees(),
            latent_dim: Some(3),
            ambient_noise: default_ambient_noise(),
            spread_ratio: default_spread_ratio(),
            source_tag: default_source_tag(),
            signal_sd: default_signal_sd(),
            baseline: default_baseline(),
            image_size: default_image_size(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_images", self.n_images),
            ("d", self.d),
            ("n_neurons", self.n_neurons),
            ("trials_per_image", self.trials_per_image),
            ("components", self.components),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::validation(format!("synth config: {name} must be >= 1")));
            }
        }
        if self.n_images < 2 {
            return Err(Error::validation("synth config: n_images must be >= 2"));
        }
        if self.session_id.trim().is_empty() {
            return Err(Error::validation("synth config: empty session_id"));
        }
        match &self.noise_sigma {
            NoiseSigma::Constant(s) if !(*s >= 0.0 && s.is_finite()) => {
                return Err(Error::validation(format!("synth config: noise_sigma {s} must be >= 0")));
            }
            NoiseSigma::PerNeuron(v) => {
                if v.len() != self.n_neurons {
                    return Err(Error::DimensionMismatch {
                        context: "synth config: noise_sigma per neuron".into(),
                        expected: self.n_neurons,
                        found: v.len(),
                    });
                }
                if v.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                    return Err(Error::validation("synth config: every noise_sigma must be >= 0"));
                }
            }
            _ => {}
        }
        if let GroundTruthKind::Nonlinear { hidden, gain } = self.ground_truth {
            if hidden == 0 || !(gain > 0.0) {
                return Err(Error::validation("synth config: nonlinear map needs hidden >= 1 and gain > 0"));
            }
        }
        if self.image_size < 2 || !self.image_size.is_multiple_of(2) {
            return Err(Error::validation("synth config: image_size must be even and >= 2"));
        }
        if !(self.signal_sd >= 0.0 && self.separation >= 0.0 && (0.0..=360.0).contains(&self.arc_degrees)) {
            return Err(Error::validation(
                "synth config: signal_sd and separation must be >= 0 and arc_degrees within [0, 360]",
            ));
        }
        if self.latent_dim == Some(0) || !(self.ambient_noise >= 0.0 && self.ambient_noise.is_finite()) {
            return Err(Error::validation("synth config: latent_dim must be >= 1 and ambient_noise >= 0"));
        }
        if !(self.spread_ratio >= 1.0 && self.spread_ratio.is_finite()) {
            return Err(Error::validation("synth config: spread_ratio must be >= 1"));
        }
        Ok(())
    }

    fn sigmas(&self) -> Vec<f64> {
        match &self.noise_sigma {
            NoiseSigma::Constant(s) => vec![*s; self.n_neurons],
            NoiseSigma::PerNeuron(v) => v.clone(),
        }
    }
}

/// Two-tone layout of a procedural raster; every layout uses each color on
/// exactly half of the pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    VerticalStripes,
    HorizontalStripes,
    Checkerboard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProceduralImage {
    pub colors: [[u8; 3]; 2],
    pub pattern: Pattern,
}

impl ProceduralImage {
    pub fn render(&self, size: usize) -> Raster {
        Raster::from_rgb8(size, size, &self.rgb8(size)).expect("well-formed raster")
    }

    fn rgb8(&self, size: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let which = match self.pattern {
                    Pattern::VerticalStripes => x % 2,
                    Pattern::HorizontalStripes => y % 2,
                    Pattern::Checkerboard => (x + y) % 2,
                };
                out.extend_from_slice(&self.colors[which]);
            }
        }
        out
    }

    /// Attribute values in closed form from the two colors.
    pub fn attributes(&self) -> AttributeRow {
        let c: Vec<[f64; 3]> = self
            .colors
            .iter()
            .map(|c| [f64::from(c[0]) / 255.0, f64::from(c[1]) / 255.0, f64::from(c[2]) / 255.0])
            .collect();
        let luma = |p: [f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        let (y0, y1) = (luma(c[0]), luma(c[1]));
        let (h0, s0) = hexcone(c[0]);
        let (h1, s1) = hexcone(c[1]);
        let angles: Vec<f64> = [(h0, s0), (h1, s1)]
            .iter()
            .filter(|(_, s)| *s > 0.0)
            .map(|(h, _)| h * std::f64::consts::TAU)
            .collect();
        let hue = if angles.is_empty() {
            0.0
        } else {
            let sy: f64 = angles.iter().map(|a| a.sin()).sum();
            let sx: f64 = angles.iter().map(|a| a.cos()).sum();
            if sx == 0.0 && sy == 0.0 {
                0.0
            } else {
                let h = sy.atan2(sx) / std::f64::consts::TAU;
                let h = if h < 0.0 { h + 1.0 } else { h };
                if h >= 1.0 {
                    0.0
                } else {
                    h
                }
            }
        };
        AttributeRow {
            hue,
            saturation: 0.5 * (s0 + s1),
            intensity: 0.5 * (y0 + y1),
            temperature: 0.5 * ((c[0][0] - c[0][2]) + (c[1][0] - c[1][2])),
            contrast: 0.5 * (y0 - y1).abs(),
        }
    }
}

/// HSV hue in `[0, 1)` and saturation of one color.
fn hexcone([r, g, b]: [f64; 3]) -> (f64, f64) {
    let max = r.max(g.max(b));
    let min = r.min(g.min(b));
    let chroma = max - min;
    if max == 0.0 {
        return (0.0, 0.0);
    }
    let s = chroma / max;
    if chroma == 0.0 {
        return (0.0, s);
    }
    let sector = if r == max {
        let v = (g - b) / chroma;
        if v < 0.0 {
            v + 6.0
        } else {
            v
        }
    } else if g == max {
        2.0 + (b - r) / chroma
    } else {
        4.0 + (r - g) / chroma
    };
    let h = sector / 6.0;
    (if h >= 1.0 { h - 1.0 } else { h }, s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub attributes: Vec<AttributeRow>,
    pub images: Vec<ProceduralImage>,
    /// Mixture component of every image.
    pub component: Vec<usize>,
    pub noise_sigma: Vec<f64>,
    /// Noise-free mean response, `[image][neuron]`.
    pub response_means: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SynthSession {
    pub config: SynthConfig,
    pub dataset: SessionDataset,
    pub ground_truth: GroundTruth,
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn standardize_columns(m: &mut DMatrix<f64>) {
    let n = m.nrows() as f64;
    for mut col in m.column_iter_mut() {
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        col.apply(|v| *v = (*v - mean) / sd);
    }
}

/// Two random orthonormal directions (Gram-Schmidt); in one dimension the
/// second direction is zero.
fn orthonormal_pair(d: usize, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let unit = |w: Vec<f64>| {
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            w.iter().map(|x| x / norm).collect()
        } else {
            w
        }
    };
    let u = unit((0..d).map(|_| normal(rng)).collect());
    let w: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
    let v = if d > 1 {
        unit(w.iter().zip(&u).map(|(b, a)| b - dot * a).collect())
    } else {
        vec![0.0]
    };
    (u, v)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn generate_session(config: &SynthConfig) -> Result<SynthSession> {
    config.validate()?;
    let n = config.n_images;
    let d = config.d;
    let e = config.n_neurons;
    let root = config.seed;

    // features: a mixture in an m-dimensional latent space, embedded linearly
    let mut rng = seed::stream(root, &["features"]);
    let m = config.latent_dim.unwrap_or(d).min(d);
    let radius = config.separation * (m as f64).sqrt();
    let (u, v) = orthonormal_pair(m, &mut rng);
    let step = if config.components > 1 {
        config.arc_degrees.to_radians() / (config.components - 1) as f64
    } else {
        0.0
    };
    let means: Vec<Vec<f64>> = (0..config.components)
        .map(|k| {
            let (sin, cos) = (k as f64 * step).sin_cos();
            (0..m).map(|j| radius * (cos * u[j] + sin * v[j])).collect()
        })
        .collect();
    let log_ratio = config.spread_ratio.ln();
    let spreads: Vec<f64> = (0..config.components)
        .map(|_| (log_ratio * rng.random_range(-1.0..=1.0)).exp())
        .collect();
    let embed = (m < d).then(|| DMatrix::from_fn(d, m, |_, _| normal(&mut rng) / (m as f64).sqrt()));
    let mut component = Vec::with_capacity(n);
    let mut feat = Vec::with_capacity(n * d);
    let mut z = nalgebra::DVector::zeros(m);
    for _ in 0..n {
        let k = rng.random_range(0..config.components);
        component.push(k);
        for (zj, mu) in z.iter_mut().zip(&means[k]) {
            *zj = mu + spreads[k] * normal(&mut rng);
        }
        match &embed {
            Some(b) => {
                let row = b * &z;
                for v in row.iter() {
                    feat.push(f64::from((v + config.ambient_noise * normal(&mut rng)) as f32));
                }
            }
            None => feat.extend(z.iter().map(|v| f64::from(*v as f32))),
        }
    }
    let x = DMatrix::from_row_slice(n, d, &feat);

    // images and attributes from squashed projections
    let mut rng = seed::stream(root, &["colors"]);
    let proj = DMatrix::from_fn(d, 6, |_, _| normal(&mut rng));
    let mut channels = &x * proj;
    standardize_columns(&mut channels);
    let images: Vec<ProceduralImage> = (0..n)
        .map(|i| {
            let q = |j: usize| (255.0 * sigmoid(1.5 * channels[(i, j)])).round() as u8;
            ProceduralImage {
                colors: [[q(0), q(1), q(2)], [q(3), q(4), q(5)]],
                pattern: match rng.random_range(0..3) {
                    0 => Pattern::VerticalStripes,
                    1 => Pattern::HorizontalStripes,
                    _ => Pattern::Checkerboard,
                },
            }
        })
        .collect();
    let attributes: Vec<AttributeRow> = images.iter().map(ProceduralImage::attributes).collect();

    // neuron means
    let mut rng = seed::stream(root, &["neurons"]);
    let mut signal = match config.ground_truth {
        GroundTruthKind::Linear => {
            let w = DMatrix::from_fn(d, e, |_, _| normal(&mut rng));
            &x * w
        }
        GroundTruthKind::Nonlinear { hidden, gain } => {
            let a = DMatrix::from_fn(d, hidden, |_, _| normal(&mut rng));
            let mut pre = &x * a;
            standardize_columns(&mut pre);
            let offsets: Vec<f64> = (0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = DMatrix::from_fn(n, hidden, |i, k| (gain * (pre[(i, k)] + offsets[k])).tanh());
            let out = DMatrix::from_fn(hidden, e, |_, _| normal(&mut rng));
            h * out
        }
    };
    standardize_columns(&mut signal);
    let response_means: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..e).map(|j| config.baseline + config.signal_sd * signal[(i, j)]).collect())
        .collect();

    // trials
    let sigmas = config.sigmas();
    let mut rng = seed::stream(root, &["trials"]);
    let mut trial_counts = Vec::with_capacity(n);
    let mut values = Vec::new();
    for means_i in &response_means {
        let t = config.trials_per_image + rng.random_range(0..=config.extra_trials);
        trial_counts.push(t);
        for _ in 0..t {
            for (mu, sigma) in means_i.iter().zip(&sigmas) {
                let v = (mu + sigma * normal(&mut rng)).max(0.0);
                values.push(f64::from(v as f32));
            }
        }
    }

    let features = FeatureMatrix::new(config.source_tag.clone(), n, d, feat)?;
    let responses = ResponseTensor::new(e, trial_counts, values)?;
    let table = match config.image_mode {
        ImageMode::FeaturesOnly => Some(AttributeTable::new(attributes.clone())?),
        ImageMode::ProceduralRasters => None,
    };
    let dataset = SessionDataset::new(config.session_id.clone(), vec![features], responses, table, None)?;
    Ok(SynthSession {
        config: config.clone(),
        dataset,
        ground_truth: GroundTruth {
            attributes,
            images,
            component,
            noise_sigma: sigmas,
            response_means,
        },
    })
}

impl SynthSession {
    pub fn raster(&self, image: usize) -> Raster {
        self.ground_truth.images[image].render(self.config.image_size)
    }

    /// Write payloads, manifest, `ground_truth.json` and, for procedural
    /// rasters, PNG images under `images/`. Returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut dataset = self.dataset.clone();
        if self.config.image_mode == ImageMode::ProceduralRasters {
            let img_dir = dir.join("images");
            fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
            let size = self.config.image_size;
            let mut rel = Vec::with_capacity(self.ground_truth.images.len());
            for (i, img) in self.ground_truth.images.iter().enumerate() {
                let name = PathBuf::from("images").join(format!("img_{i:05}.png"));
                let path = dir.join(&name);
                image::RgbImage::from_raw(size as u32, size as u32, img.rgb8(size))
                    .expect("buffer matches dimensions")
                    .save(&path)
                    .map_err(|e| Error::Image {
                        path: path.clone(),
                        reason: e.to_string(),
                    })?;
                rel.push(name);
            }
            dataset.image_paths = Some(rel);
        }
        let manifest = save_session(&dataset, dir)?;
        let gt_path = dir.join("ground_truth.json");
        let text = serde_json::to_string(&self.ground_truth).map_err(|source| Error::Json {
            context: gt_path.display().to_string(),
            source,
        })?;
        fs::write(&gt_path, text).map_err(|e| Error::io(&gt_path, e))?;
        Ok(manifest)
    }
}
