//! Image-computable attributes: hue, saturation, intensity, temperature, contrast.
//!
//! All five are functions of the multiset of pixel colors (channels scaled to
//! `[0, 1]`):
//!
//! - intensity: mean luma `Y = 0.299 R + 0.587 G + 0.114 B`
//! - contrast: population standard deviation of per-pixel luma (RMS contrast)
//! - saturation: mean HSV saturation `(max - min) / max`, 0 for black
//! - hue: circular mean of HSV hue over pixels with non-zero saturation, in `[0, 1)`;
//!   0 for an image with no chromatic pixel
//! - temperature: mean of `R - B`

use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AttributeRow, AttributeTable, SessionDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Hue,
    Saturation,
    Intensity,
    Temperature,
    Contrast,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 5] = [
        AttributeKind::Hue,
        AttributeKind::Saturation,
        AttributeKind::Intensity,
        AttributeKind::Temperature,
        AttributeKind::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttributeKind::Hue => "hue",
            AttributeKind::Saturation => "saturation",
            AttributeKind::Intensity => "intensity",
            AttributeKind::Temperature => "temperature",
            AttributeKind::Contrast => "contrast",
        }
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttributeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttributeKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::validation(format!("unknown attribute '{s}'")))
    }
}

/// Decoded RGB raster with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl Raster {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation("raster has zero pixels"));
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "raster pixel count".into(),
                expected: width * height,
                found: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Interleaved 8-bit RGB; channels are divided by 255.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::validation(format!(
                "expected {} bytes of interleaved RGB for {width}x{height}, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        let pixels = bytes
            .chunks_exact(3)
            .map(|c| [f64::from(c[0]) / 255.0, f64::from(c[1]) / 255.0, f64::from(c[2]) / 255.0])
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn uniform(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        Self::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }
}

pub fn luma([r, g, b]: [f64; 3]) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// HSV hue in `[0, 1)` and saturation in `[0, 1]`.
pub fn hue_saturation([r, g, b]: [f64; 3]) -> (f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let sat = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, sat);
    }
    let h6 = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let h = h6 / 6.0;
    (if h >= 1.0 { 0.0 } else { h }, sat)
}

fn circular_mean_unit(sum_sin: f64, sum_cos: f64) -> f64 {
    if sum_sin == 0.0 && sum_cos == 0.0 {
        return 0.0;
    }
    let h = (sum_sin.atan2(sum_cos) / TAU).rem_euclid(1.0);
    if h >= 1.0 {
        0.0
    } else {
        h
    }
}

pub fn compute_attribute(image: &Raster, kind: AttributeKind) -> f64 {
    let n = image.pixels.len() as f64;
    match kind {
        AttributeKind::Intensity => image.pixels.iter().map(|&p| luma(p)).sum::<f64>() / n,
        AttributeKind::Contrast => {
            let mean = image.pixels.iter().map(|&p| luma(p)).sum::<f64>() / n;
            let var = image
                .pixels
                .iter()
                .map(|&p| {
                    let d = luma(p) - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            var.sqrt()
        }
        AttributeKind::Saturation => image.pixels.iter().map(|&p| hue_saturation(p).1).sum::<f64>() / n,
        AttributeKind::Temperature => image.pixels.iter().map(|&[r, _, b]| r - b).sum::<f64>() / n,
        AttributeKind::Hue => {
            let (mut s, mut c) = (0.0, 0.0);
            for &p in &image.pixels {
                let (h, sat) = hue_saturation(p);
                if sat > 0.0 {
                    s += (TAU * h).sin();
                    c += (TAU * h).cos();
                }
            }
            circular_mean_unit(s, c)
        }
    }
}

pub fn compute_row(image: &Raster) -> AttributeRow {
    AttributeRow {
        hue: compute_attribute(image, AttributeKind::Hue),
        saturation: compute_attribute(image, AttributeKind::Saturation),
        intensity: compute_attribute(image, AttributeKind::Intensity),
        temperature: compute_attribute(image, AttributeKind::Temperature),
        contrast: compute_attribute(image, AttributeKind::Contrast),
    }
}

/// Compute the attribute table from the session's images and store it on the session.
///
/// Fails without touching the session if any image cannot be decoded.
pub fn compute_all(session: &mut SessionDataset) -> Result<AttributeTable> {
    let paths = session.image_paths.as_ref().ok_or_else(|| {
        Error::validation(format!("session '{}' has no image paths", session.session_id))
    })?;
    let rows = paths
        .par_iter()
        .map(|p| Raster::open(p).map(|r| compute_row(&r)))
        .collect::<Result<Vec<_>>>()?;
    let table = AttributeTable::new(rows)?;
    if table.len() != session.n_images() {
        return Err(Error::DimensionMismatch {
            context: format!("session '{}': image paths vs images", session.session_id),
            expected: session.n_images(),
            found: table.len(),
        });
    }
    session.attributes = Some(table.clone());
    Ok(table)
}
