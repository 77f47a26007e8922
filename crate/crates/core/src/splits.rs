//! Train/test partitions: random in-distribution hold-out, attribute-percentile
//! hold-outs, and cosine-distance Near/Far hold-outs.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attributes::AttributeKind;
use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::seed;
use crate::shift::cosine_distance;
use crate::stats::percentile_sorted;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HoldOutStrategy {
    High,
    Low,
    Mid,
}

impl HoldOutStrategy {
    pub const ALL: [HoldOutStrategy; 3] = [HoldOutStrategy::High, HoldOutStrategy::Low, HoldOutStrategy::Mid];

    pub fn name(self) -> &'static str {
        match self {
            HoldOutStrategy::High => "high",
            HoldOutStrategy::Low => "low",
            HoldOutStrategy::Mid => "mid",
        }
    }
}

impl fmt::Display for HoldOutStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HoldOutStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HoldOutStrategy::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::validation(format!("unknown hold-out strategy '{s}'")))
    }
}

/// Percentile cut-offs for each hold-out strategy.
///
/// `mid` defaults to 42.5–62.5; 42.5–67.5 is the other band in circulation and
/// can be set explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PercentileCuts {
    pub high: f64,
    pub low: f64,
    pub mid: (f64, f64),
}

impl Default for PercentileCuts {
    fn default() -> Self {
        Self {
            high: 75.0,
            low: 25.0,
            mid: (42.5, 62.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Random {
        fraction: f64,
        seed: u64,
    },
    Attribute {
        strategy: HoldOutStrategy,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attribute: Option<AttributeKind>,
        percentiles: Vec<f64>,
        cutoffs: Vec<f64>,
    },
    Distance {
        /// `ind`, `near` or `far`
        role: String,
        seed_image: usize,
        seed: u64,
        source_tag: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    #[serde(default)]
    pub discarded: Vec<usize>,
    pub provenance: Provenance,
}

impl SplitAssignment {
    /// Disjoint, exhaustive over `0..n_images`, with non-empty train and test.
    pub fn validate(&self, n_images: usize) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::validation(format!(
                "split '{}' has an empty train ({}) or test ({}) set",
                self.name,
                self.train.len(),
                self.test.len()
            )));
        }
        let mut seen = vec![false; n_images];
        for &i in self.train.iter().chain(&self.test).chain(&self.discarded) {
            if i >= n_images {
                return Err(Error::validation(format!(
                    "split '{}' references image {i} >= {n_images}",
                    self.name
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::validation(format!(
                    "split '{}' assigns image {i} more than once",
                    self.name
                )));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::validation(format!(
                "split '{}' does not assign image {missing}",
                self.name
            )));
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })
    }
}

/// Hold out `round(fraction * n_images)` images uniformly at random.
pub fn ind_split(n_images: usize, fraction: f64, seed: u64) -> Result<SplitAssignment> {
    if n_images < 8 {
        return Err(Error::validation(format!("ind split needs at least 8 images, got {n_images}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::validation(format!("ind fraction {fraction} outside (0, 1)")));
    }
    let k = (fraction * n_images as f64).round() as usize;
    if k == 0 || k >= n_images {
        return Err(Error::validation(format!(
            "fraction {fraction} of {n_images} images leaves an empty train or test set"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut test = index::sample(&mut rng, n_images, k).into_vec();
    test.sort_unstable();
    let mut is_test = vec![false; n_images];
    for &i in &test {
        is_test[i] = true;
    }
    let train = (0..n_images).filter(|&i| !is_test[i]).collect();
    Ok(SplitAssignment {
        name: "ind".into(),
        train,
        test,
        discarded: Vec::new(),
        provenance: Provenance::Random { fraction, seed },
    })
}

/// Percentile hold-out on one attribute. Images equal to a cut-off stay in train.
pub fn attribute_split(values: &[f64], strategy: HoldOutStrategy, cuts: PercentileCuts) -> Result<SplitAssignment> {
    let n = values.len();
    if n < 8 {
        return Err(Error::validation(format!("attribute split needs at least 8 images, got {n}")));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "attribute values".into(),
            row: i,
            col: 0,
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (percentiles, cutoffs, in_test): (Vec<f64>, Vec<f64>, Box<dyn Fn(f64) -> bool>) = match strategy {
        HoldOutStrategy::High => {
            let cut = percentile_sorted(&sorted, cuts.high);
            (vec![cuts.high], vec![cut], Box::new(move |v| v > cut))
        }
        HoldOutStrategy::Low => {
            let cut = percentile_sorted(&sorted, cuts.low);
            (vec![cuts.low], vec![cut], Box::new(move |v| v < cut))
        }
        HoldOutStrategy::Mid => {
            let (plo, phi) = cuts.mid;
            if !(plo < phi) {
                return Err(Error::validation(format!("mid band ({plo}, {phi}) is empty")));
            }
            let lo = percentile_sorted(&sorted, plo);
            let hi = percentile_sorted(&sorted, phi);
            (vec![plo, phi], vec![lo, hi], Box::new(move |v| lo < v && v < hi))
        }
    };
    let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| in_test(values[i]));
    if test.is_empty() || train.is_empty() {
        return Err(Error::DegenerateAttribute(format!(
            "{strategy} hold-out at cut-offs {cutoffs:?} selects {} of {n} images",
            test.len()
        )));
    }
    Ok(SplitAssignment {
        name: strategy.name().to_string(),
        train,
        test,
        discarded: Vec::new(),
        provenance: Provenance::Attribute {
            strategy,
            attribute: None,
            percentiles,
            cutoffs,
        },
    })
}

/// Attribute hold-out named `<attribute>-<strategy>`.
pub fn attribute_split_for(
    kind: AttributeKind,
    values: &[f64],
    strategy: HoldOutStrategy,
    cuts: PercentileCuts,
) -> Result<SplitAssignment> {
    let mut split = attribute_split(values, strategy, cuts)?;
    split.name = format!("{kind}-{strategy}");
    if let Provenance::Attribute { attribute, .. } = &mut split.provenance {
        *attribute = Some(kind);
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedImage {
    Random,
    Index(usize),
}

/// Images ranked by cosine distance to a seed image and cut into chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSplit {
    pub seed_image: usize,
    /// Image indices in increasing distance from the seed; `order[0]` is the seed.
    pub order: Vec<usize>,
    pub distances: Vec<f64>,
    pub train: Vec<usize>,
    pub ind_test: Vec<usize>,
    pub discarded: Vec<usize>,
    pub near_ood: Vec<usize>,
    pub far_ood: Vec<usize>,
    seed: u64,
    source_tag: String,
}

/// Rank boundaries (exclusive ends) of the 80 / 90 / 95 percentile chunks.
pub fn distance_chunk_bounds(n: usize) -> (usize, usize, usize) {
    let at = |pct: usize| (n * pct + 50) / 100;
    (at(80), at(90), at(95))
}

pub fn distance_split(features: &FeatureMatrix, seed_image: SeedImage, seed: u64) -> Result<DistanceSplit> {
    let n = features.n_rows();
    if n < 20 {
        return Err(Error::validation(format!("distance split needs at least 20 images, got {n}")));
    }
    let (b1, b2, b3) = distance_chunk_bounds(n);
    if !(b1 < b2 && b2 < b3 && b3 < n && b1 > b3 - b2) {
        return Err(Error::validation(format!("{n} images leave an empty distance chunk")));
    }
    let mut rng = seed::rng(seed);
    let seed_idx = match seed_image {
        SeedImage::Random => rng.random_range(0..n),
        SeedImage::Index(i) if i < n => i,
        SeedImage::Index(i) => {
            return Err(Error::validation(format!("seed image {i} out of range for {n} images")));
        }
    };
    let anchor = features.row(seed_idx);
    let mut distances = vec![0.0; n];
    for (i, d) in distances.iter_mut().enumerate() {
        *d = if i == seed_idx {
            0.0
        } else {
            cosine_distance(anchor, features.row(i)).map_err(|e| match e {
                Error::Validation(m) => Error::validation(format!("image {i}: {m}")),
                other => other,
            })?
        };
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| i != seed_idx).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order.insert(0, seed_idx);

    let chunk1 = &order[..b1];
    let near: Vec<usize> = order[b2..b3].to_vec();
    let far: Vec<usize> = order[b3..].to_vec();
    let picks = index::sample(&mut rng, chunk1.len(), near.len()).into_vec();
    let mut in_test = vec![false; chunk1.len()];
    for p in picks {
        in_test[p] = true;
    }
    let mut ind_test = Vec::with_capacity(near.len());
    let mut train = Vec::with_capacity(chunk1.len() - near.len());
    for (k, &img) in chunk1.iter().enumerate() {
        if in_test[k] {
            ind_test.push(img);
        } else {
            train.push(img);
        }
    }
    let sorted = |mut v: Vec<usize>| {
        v.sort_unstable();
        v
    };
    Ok(DistanceSplit {
        seed_image: seed_idx,
        distances,
        train: sorted(train),
        ind_test: sorted(ind_test),
        discarded: sorted(order[b1..b2].to_vec()),
        near_ood: sorted(near),
        far_ood: sorted(far),
        order,
        seed,
        source_tag: features.source_tag().to_string(),
    })
}

impl DistanceSplit {
    /// Three assignments sharing one train set: `distance-ind`, `distance-near`, `distance-far`.
    /// Each assignment discards every image outside its own train and test sets.
    pub fn assignments(&self) -> [SplitAssignment; 3] {
        let make = |role: &str, test: &Vec<usize>, others: [&Vec<usize>; 3]| {
            let mut discarded: Vec<usize> = others.iter().flat_map(|v| v.iter().copied()).collect();
            discarded.sort_unstable();
            SplitAssignment {
                name: format!("distance-{role}"),
                train: self.train.clone(),
                test: test.clone(),
                discarded,
                provenance: Provenance::Distance {
                    role: role.to_string(),
                    seed_image: self.seed_image,
                    seed: self.seed,
                    source_tag: self.source_tag.clone(),
                },
            }
        };
        [
            make("ind", &self.ind_test, [&self.discarded, &self.near_ood, &self.far_ood]),
            make("near", &self.near_ood, [&self.discarded, &self.ind_test, &self.far_ood]),
            make("far", &self.far_ood, [&self.discarded, &self.ind_test, &self.near_ood]),
        ]
    }

    /// Rank of every image in `order`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.order.len()];
        for (rank, &img) in self.order.iter().enumerate() {
            r[img] = rank;
        }
        r
    }
}
