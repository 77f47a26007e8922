//! End-to-end benchmark run: attributes, splits, shift metrics, encoding fits
//! and the aggregated report, driven by one JSON config and one root seed.
//!
//! Every random draw is seeded from `(root seed, session id, purpose)` so a
//! session's results do not depend on which other sessions share the run or
//! on the worker count.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{build_report, write_encoding_csv, BenchmarkReport, SplitFamily, SplitScore};
use crate::attributes::{compute_all, AttributeKind};
use crate::data::{load_session, AttributeTable, SessionDataset};
use crate::encoder::{fit_session, EncoderConfig, EncodingResult};
use crate::error::{Error, Result};
use crate::seed;
use crate::shift::{measure_split, ShiftConfig, ShiftMeasurement};
use crate::splits::{
    attribute_split_for, distance_split, ind_split, HoldOutStrategy, PercentileCuts, SeedImage, SplitAssignment,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceSpec {
    pub enabled: bool,
    /// Features that define cosine distances; the first run tag when unset.
    pub source_tag: Option<String>,
    pub seed_image: SeedImage,
}

impl Default for DistanceSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            source_tag: None,
            seed_image: SeedImage::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub ind_fraction: f64,
    pub attributes: Vec<AttributeKind>,
    pub strategies: Vec<HoldOutStrategy>,
    pub cuts: PercentileCuts,
    pub distance: DistanceSpec,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ind_fraction: 0.25,
            attributes: AttributeKind::ALL.to_vec(),
            strategies: HoldOutStrategy::ALL.to_vec(),
            cuts: PercentileCuts::default(),
            distance: DistanceSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Session manifests; relative paths resolve against the config file.
    pub sessions: Vec<PathBuf>,
    pub source_tags: Vec<String>,
    #[serde(default)]
    pub splits: SplitSpec,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub shift: ShiftConfig,
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        for s in &mut config.sessions {
            if s.is_relative() {
                *s = base.join(&*s);
            }
        }
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<u64> {
        let seed = self
            .seed
            .ok_or_else(|| Error::validation("run config has no seed; a seed is required for reproducibility"))?;
        if self.sessions.is_empty() {
            return Err(Error::validation("run config lists no sessions"));
        }
        if self.source_tags.is_empty() {
            return Err(Error::validation("run config lists no source_tags"));
        }
        let s = &self.splits;
        if !(s.ind_fraction > 0.0 && s.ind_fraction < 1.0) {
            return Err(Error::validation(format!("ind_fraction {} outside (0, 1)", s.ind_fraction)));
        }
        if s.attributes.is_empty() != s.strategies.is_empty() {
            return Err(Error::validation("attribute splits need both attributes and strategies"));
        }
        if self.encoder.lambda_grid.is_empty() || self.encoder.folds < 2 || self.encoder.ceiling_repeats == 0 {
            return Err(Error::validation("encoder config needs a lambda grid, folds >= 2 and ceiling_repeats >= 1"));
        }
        Ok(seed)
    }

    fn distance_tag(&self) -> &str {
        self.splits
            .distance
            .source_tag
            .as_deref()
            .unwrap_or(&self.source_tags[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedSplit {
    pub family: SplitFamily,
    pub split: SplitAssignment,
}

/// Attributes from the session's table when present, else computed from its
/// images.
pub fn ensure_attributes(session: &mut SessionDataset) -> Result<AttributeTable> {
    if let Some(t) = &session.attributes {
        return Ok(t.clone());
    }
    if session.image_paths.is_none() {
        return Err(Error::validation(format!(
            "session {} has neither an attribute table nor image paths",
            session.session_id
        )));
    }
    compute_all(session)
}

/// InD, attribute and distance splits of one session. Attribute hold-outs with
/// an empty train or test set are dropped with a warning.
pub fn plan_splits(session: &mut SessionDataset, config: &RunConfig, root: u64) -> Result<Vec<PlannedSplit>> {
    let id = session.session_id.clone();
    let n = session.n_images();
    let spec = &config.splits;
    let mut out = vec![PlannedSplit {
        family: SplitFamily::Ind,
        split: ind_split(n, spec.ind_fraction, seed::derive(root, &[&id, "ind"]))?,
    }];

    if !spec.attributes.is_empty() {
        let table = ensure_attributes(session)?;
        for &kind in &spec.attributes {
            let values = table.column(kind);
            for &strategy in &spec.strategies {
                match attribute_split_for(kind, &values, strategy, spec.cuts) {
                    Ok(split) => out.push(PlannedSplit {
                        family: SplitFamily::Attribute,
                        split,
                    }),
                    Err(Error::DegenerateAttribute(msg)) => warn!("session {id}: {kind}-{strategy} dropped: {msg}"),
                    Err(e) => return Err(e),
                }
            }
        }
    }

    if spec.distance.enabled {
        let features = session.feature(config.distance_tag())?;
        let d = distance_split(features, spec.distance.seed_image, seed::derive(root, &[&id, "distance"]))?;
        out.extend(d.assignments().into_iter().map(|split| PlannedSplit {
            family: SplitFamily::Distance,
            split,
        }));
    }
    Ok(out)
}

/// Seed of the shift classifier for one (session, split, source tag).
pub fn shift_seed(root: u64, session: &str, split: &str, source_tag: &str) -> u64 {
    seed::derive(root, &[session, "shift", split, source_tag])
}

/// Seed of the noise-ceiling shuffles for one (session, split, source tag).
pub fn encoder_seed(root: u64, session: &str, split: &str, source_tag: &str) -> u64 {
    seed::derive(root, &[session, "encoder", split, source_tag])
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SessionOutcome {
    pub splits: Vec<PlannedSplit>,
    pub scores: Vec<SplitScore>,
    pub measurements: Vec<ShiftMeasurement>,
    /// `(split, source_tag, result)` for every neuron.
    pub encodings: Vec<(String, String, EncodingResult)>,
}

/// Splits, shift metrics and fits for one in-memory session. A split whose
/// metrics or fit fail is dropped with a warning.
pub fn evaluate_session(session: &mut SessionDataset, config: &RunConfig, root: u64) -> Result<SessionOutcome> {
    session.validate()?;
    for tag in &config.source_tags {
        session.feature(tag)?;
    }
    let splits = plan_splits(session, config, root)?;
    let session: &SessionDataset = session;
    let id = session.session_id.as_str();

    let jobs: Vec<(&PlannedSplit, &str)> = splits
        .iter()
        .flat_map(|p| config.source_tags.iter().map(move |t| (p, t.as_str())))
        .collect();
    let results: Vec<Option<(SplitScore, ShiftMeasurement, Vec<EncodingResult>)>> = jobs
        .par_iter()
        .map(|&(planned, tag)| {
            let split = &planned.split;
            let run = || -> Result<_> {
                let features = session.feature(tag)?;
                let m = measure_split(
                    id,
                    features,
                    split,
                    &config.shift,
                    shift_seed(root, id, &split.name, tag),
                )?;
                let r = fit_session(
                    session,
                    split,
                    tag,
                    &config.encoder,
                    encoder_seed(root, id, &split.name, tag),
                )?;
                Ok((SplitScore::from_results(id, &split.name, tag, planned.family, &r), m, r))
            };
            match run() {
                Ok(v) => Some(v),
                Err(e) => {
                    warn!("session {id} split {} [{tag}] dropped: {e}", split.name);
                    None
                }
            }
        })
        .collect();

    let mut outcome = SessionOutcome::default();
    for ((planned, tag), r) in jobs.iter().zip(results) {
        let Some((score, m, enc)) = r else { continue };
        outcome.scores.push(score);
        outcome.measurements.push(m);
        outcome
            .encodings
            .extend(enc.into_iter().map(|e| (planned.split.name.clone(), tag.to_string(), e)));
    }
    outcome.splits = splits;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFailure {
    pub manifest: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: BenchmarkReport,
    pub succeeded: Vec<String>,
    pub failures: Vec<SessionFailure>,
}

/// Run every session on a pool of `workers` threads (all cores when `None`)
/// and write all outputs under `config.output_dir`.
///
/// Failed sessions are logged and listed in `failures.json`; the run is an
/// error only when no session succeeds.
pub fn run_pipeline(config: &RunConfig, workers: Option<usize>) -> Result<RunOutput> {
    let root = config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::validation(format!("cannot start worker pool: {e}")))?;

    let outcomes: Vec<Result<(SessionDataset, SessionOutcome)>> = pool.install(|| {
        config
            .sessions
            .par_iter()
            .map(|path| {
                let mut s = load_session(path)?;
                let o = evaluate_session(&mut s, config, root)?;
                Ok((s, o))
            })
            .collect()
    });

    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut seen = BTreeSet::new();
    let mut scores = Vec::new();
    let mut measurements = Vec::new();
    let mut encodings = Vec::new();
    let mut succeeded = Vec::new();
    let mut failures = Vec::new();
    for (path, result) in config.sessions.iter().zip(outcomes) {
        let result = result.and_then(|(s, o)| {
            if seen.insert(s.session_id.clone()) {
                Ok((s, o))
            } else {
                Err(Error::validation(format!("duplicate session id {}", s.session_id)))
            }
        });
        match result {
            Ok((session, o)) => {
                let id = session.session_id;
                let dir = out.join("splits").join(sanitize(&id));
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for p in &o.splits {
                    p.split.write_json(&dir.join(format!("{}.json", sanitize(&p.split.name))))?;
                }
                info!("session {id}: {} splits, {} scored", o.splits.len(), o.scores.len());
                scores.extend(o.scores);
                measurements.extend(o.measurements);
                encodings.extend(o.encodings.into_iter().map(|(split, tag, r)| (id.clone(), split, tag, r)));
                succeeded.push(id);
            }
            Err(e) => {
                warn!("session {} failed: {e}", path.display());
                failures.push(SessionFailure {
                    manifest: path.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    write_json(&out.join("failures.json"), &failures)?;
    if succeeded.is_empty() {
        return Err(Error::validation(format!(
            "all {} sessions failed; see {}",
            failures.len(),
            out.join("failures.json").display()
        )));
    }

    write_encoding_csv(&out.join("encoding.csv"), &encodings)?;
    write_json(&out.join("split_scores.json"), &scores)?;
    write_json(&out.join("shift_measurements.json"), &measurements)?;
    let report = build_report(scores, measurements);
    report.write(out)?;
    Ok(RunOutput {
        report,
        succeeded,
        failures,
    })
}

/// Rebuild the report from the `split_scores.json` and
/// `shift_measurements.json` of an earlier run.
pub fn analyze_run(run_dir: &Path) -> Result<BenchmarkReport> {
    let scores: Vec<SplitScore> = read_json(&run_dir.join("split_scores.json"))?;
    let measurements: Vec<ShiftMeasurement> = read_json(&run_dir.join("shift_measurements.json"))?;
    Ok(build_report(scores, measurements))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
