//! Aggregation of per-neuron results into session medians, OOD/InD ratios,
//! shift-vs-score correlations and paired significance tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::encoder::EncodingResult;
use crate::error::{Error, Result};
use crate::shift::ShiftMeasurement;
use crate::stats::{mean, median, mid_ranks, pearson, sample_sd, sem};

/// Median score over reliable neurons; `None` when there are none.
pub fn session_median(results: &[EncodingResult]) -> Option<f64> {
    let scores: Vec<f64> = results.iter().filter_map(|r| r.score).collect();
    median(&scores)
}

pub fn ood_ind_ratio(ood_median: f64, ind_median: f64) -> Option<f64> {
    if ind_median > 0.0 && ind_median.is_finite() && ood_median.is_finite() {
        Some(ood_median / ind_median)
    } else {
        None
    }
}

/// Two-sided p-value of a t statistic.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Upper quantile of Student's t, e.g. `q = 0.95` for a one-sided 95% bound.
pub fn t_quantile(q: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom").inverse_cdf(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub p: f64,
    pub n: usize,
}

/// Spearman rank correlation with mid-ranks for ties; p from the t
/// approximation with `n - 2` degrees of freedom. `Ok(None)` when either input
/// is constant.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Option<Correlation>> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "spearman inputs".into(),
            expected: x.len(),
            found: y.len(),
        });
    }
    let n = x.len();
    if n < 5 {
        return Err(Error::validation(format!("spearman needs at least 5 pairs, got {n}")));
    }
    let Some(rho) = pearson(&mid_ranks(x), &mid_ranks(y)) else {
        return Ok(None);
    };
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * ((n as f64 - 2.0) / (1.0 - rho * rho)).sqrt();
        t_two_sided_p(t, n as f64 - 2.0)
    };
    Ok(Some(Correlation { rho, p, n }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub n: usize,
    pub mean_diff: f64,
    /// Differences had zero variance; `t` is 0 or infinite.
    pub degenerate: bool,
}

/// Paired two-sided t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "paired t-test samples".into(),
            expected: a.len(),
            found: b.len(),
        });
    }
    let n = a.len();
    if n < 3 {
        return Err(Error::validation(format!("paired t-test needs at least 3 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let md = mean(&d);
    let sd = sample_sd(&d);
    if sd == 0.0 {
        let t = if md == 0.0 { 0.0 } else { md.signum() * f64::INFINITY };
        return Ok(TTest {
            t,
            p: if md == 0.0 { 1.0 } else { 0.0 },
            n,
            mean_diff: md,
            degenerate: true,
        });
    }
    let t = md / (sd / (n as f64).sqrt());
    Ok(TTest {
        t,
        p: t_two_sided_p(t, n as f64 - 1.0),
        n,
        mean_diff: md,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitFamily {
    Ind,
    Attribute,
    Distance,
}

impl SplitFamily {
    pub fn name(self) -> &'static str {
        match self {
            SplitFamily::Ind => "ind",
            SplitFamily::Attribute => "attribute",
            SplitFamily::Distance => "distance",
        }
    }
}

/// Session median for one (session, split, source_tag).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub session: String,
    pub split: String,
    pub source_tag: String,
    pub family: SplitFamily,
    pub median_score: Option<f64>,
    pub n_reliable: usize,
    pub n_neurons: usize,
}

impl SplitScore {
    pub fn from_results(
        session: &str,
        split: &str,
        source_tag: &str,
        family: SplitFamily,
        results: &[EncodingResult],
    ) -> Self {
        Self {
            session: session.to_string(),
            split: split.to_string(),
            source_tag: source_tag.to_string(),
            family,
            median_score: session_median(results),
            n_reliable: results.iter().filter(|r| r.is_reliable()).count(),
            n_neurons: results.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMetric {
    Ccd,
    Mmd,
    Cov,
}

impl ShiftMetric {
    pub const ALL: [ShiftMetric; 3] = [ShiftMetric::Ccd, ShiftMetric::Mmd, ShiftMetric::Cov];

    pub fn name(self) -> &'static str {
        match self {
            ShiftMetric::Ccd => "ccd",
            ShiftMetric::Mmd => "mmd",
            ShiftMetric::Cov => "cov",
        }
    }

    pub fn value(self, m: &ShiftMeasurement) -> Option<f64> {
        match self {
            ShiftMetric::Ccd => m.ccd,
            ShiftMetric::Mmd => m.mmd_squared,
            ShiftMetric::Cov => m.covariate_shift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub scope: String,
    pub source_tag: String,
    pub metric: ShiftMetric,
    pub n: usize,
    pub rho: Option<f64>,
    pub p: Option<f64>,
}

type Key = (String, String, String);

fn key(session: &str, split: &str, tag: &str) -> Key {
    (session.to_string(), split.to_string(), tag.to_string())
}

/// Spearman correlation of every shift metric against session medians over
/// the matched (session, split, source_tag) points of `scores`.
pub fn correlate_shift_with_performance(
    scope: &str,
    source_tag: &str,
    measurements: &[ShiftMeasurement],
    scores: &[SplitScore],
) -> Vec<CorrelationRecord> {
    let by_key: BTreeMap<Key, &ShiftMeasurement> = measurements
        .iter()
        .map(|m| (key(&m.session, &m.split, &m.source_tag), m))
        .collect();
    ShiftMetric::ALL
        .into_iter()
        .map(|metric| {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            let mut dropped = 0usize;
            for s in scores.iter().filter(|s| s.source_tag == source_tag) {
                let value = by_key
                    .get(&key(&s.session, &s.split, &s.source_tag))
                    .and_then(|m| metric.value(m));
                match (value, s.median_score) {
                    (Some(x), Some(y)) => {
                        xs.push(x);
                        ys.push(y);
                    }
                    _ => dropped += 1,
                }
            }
            if dropped > 0 {
                warn!("{scope}/{source_tag}/{}: dropped {dropped} unmatched points", metric.name());
            }
            let corr = if xs.len() >= 5 {
                spearman_rho(&xs, &ys).ok().flatten()
            } else {
                None
            };
            CorrelationRecord {
                scope: scope.to_string(),
                source_tag: source_tag.to_string(),
                metric,
                n: xs.len(),
                rho: corr.map(|c| c.rho),
                p: corr.map(|c| c.p),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRecord {
    pub session: String,
    pub source_tag: String,
    pub split: String,
    pub baseline: String,
    pub ood_median: f64,
    pub ind_median: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub split: String,
    pub source_tag: String,
    pub n: usize,
    pub mean: f64,
    pub sem: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestRecord {
    pub source_tag: String,
    pub comparison: String,
    pub result: Option<TTest>,
    pub n_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub split_scores: Vec<SplitScore>,
    /// Mean and SEM across sessions of the session medians.
    pub score_summary: Vec<Summary>,
    pub ratios: Vec<RatioRecord>,
    pub ratio_summary: Vec<Summary>,
    pub correlations: Vec<CorrelationRecord>,
    pub ttests: Vec<TTestRecord>,
    pub measurements: Vec<ShiftMeasurement>,
}

/// Baseline split for an OOD split's ratio.
pub fn baseline_for(split: &str, family: SplitFamily) -> Option<&'static str> {
    match family {
        SplitFamily::Attribute => Some("ind"),
        SplitFamily::Distance if split != "distance-ind" => Some("distance-ind"),
        _ => None,
    }
}

fn summarize(groups: BTreeMap<(String, String), Vec<f64>>) -> Vec<Summary> {
    groups
        .into_iter()
        .map(|((split, source_tag), v)| Summary {
            split,
            source_tag,
            n: v.len(),
            mean: mean(&v),
            sem: if v.len() >= 2 { sem(&v) } else { f64::NAN },
        })
        .collect()
}

pub const DISTANCE_COMPARISONS: [(&str, &str); 3] = [
    ("distance-ind", "distance-near"),
    ("distance-near", "distance-far"),
    ("distance-ind", "distance-far"),
];

pub fn build_report(mut scores: Vec<SplitScore>, mut measurements: Vec<ShiftMeasurement>) -> BenchmarkReport {
    scores.sort_by(|a, b| (&a.session, &a.split, &a.source_tag).cmp(&(&b.session, &b.split, &b.source_tag)));
    measurements.sort_by(|a, b| (&a.session, &a.split, &a.source_tag).cmp(&(&b.session, &b.split, &b.source_tag)));
    let medians: BTreeMap<Key, f64> = scores
        .iter()
        .filter_map(|s| s.median_score.map(|m| (key(&s.session, &s.split, &s.source_tag), m)))
        .collect();

    let mut score_groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for s in &scores {
        if let Some(m) = s.median_score {
            score_groups.entry((s.split.clone(), s.source_tag.clone())).or_default().push(m);
        }
    }

    let mut ratios = Vec::new();
    let mut missing = 0usize;
    for s in &scores {
        let Some(base) = baseline_for(&s.split, s.family) else { continue };
        let ind = medians.get(&key(&s.session, base, &s.source_tag)).copied();
        match (s.median_score, ind) {
            (Some(ood), Some(ind)) => match ood_ind_ratio(ood, ind) {
                Some(ratio) => ratios.push(RatioRecord {
                    session: s.session.clone(),
                    source_tag: s.source_tag.clone(),
                    split: s.split.clone(),
                    baseline: base.to_string(),
                    ood_median: ood,
                    ind_median: ind,
                    ratio,
                }),
                None => missing += 1,
            },
            _ => missing += 1,
        }
    }
    if missing > 0 {
        warn!("{missing} OOD/InD ratios undefined (missing or non-positive medians)");
    }
    let mut ratio_groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &ratios {
        ratio_groups.entry((r.split.clone(), r.source_tag.clone())).or_default().push(r.ratio);
    }

    let tags: BTreeSet<String> = scores.iter().map(|s| s.source_tag.clone()).collect();
    let mut correlations = Vec::new();
    let mut ttests = Vec::new();
    for tag in &tags {
        for (scope, family) in [("distance", SplitFamily::Distance), ("attribute", SplitFamily::Attribute)] {
            let subset: Vec<SplitScore> = scores.iter().filter(|s| s.family == family).cloned().collect();
            if !subset.is_empty() {
                correlations.extend(correlate_shift_with_performance(scope, tag, &measurements, &subset));
            }
        }
        let sessions: BTreeSet<&str> = scores
            .iter()
            .filter(|s| &s.source_tag == tag && s.family == SplitFamily::Distance)
            .map(|s| s.session.as_str())
            .collect();
        if sessions.is_empty() {
            continue;
        }
        for (a, b) in DISTANCE_COMPARISONS {
            let mut xa = Vec::new();
            let mut xb = Vec::new();
            let mut dropped = 0;
            for s in &sessions {
                match (medians.get(&key(s, a, tag)), medians.get(&key(s, b, tag))) {
                    (Some(&va), Some(&vb)) => {
                        xa.push(va);
                        xb.push(vb);
                    }
                    _ => dropped += 1,
                }
            }
            if dropped > 0 {
                warn!("{tag} {a} vs {b}: dropped {dropped} sessions missing a split");
            }
            ttests.push(TTestRecord {
                source_tag: tag.clone(),
                comparison: format!("{a} vs {b}"),
                result: paired_t_test(&xa, &xb).ok(),
                n_dropped: dropped,
            });
        }
    }

    BenchmarkReport {
        score_summary: summarize(score_groups),
        ratio_summary: summarize(ratio_groups),
        split_scores: scores,
        ratios,
        correlations,
        ttests,
        measurements,
    }
}

fn fmt_f(v: f64) -> String {
    if v.is_finite() || v.is_infinite() {
        v.to_string()
    } else {
        String::new()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let csv_err = |source| Error::Csv {
        context: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const REPORT_CSVS: [&str; 5] = [
    "ratios.csv",
    "distance_vs_score.csv",
    "metric_correlations.csv",
    "ttests.csv",
    "score_summary.csv",
];

impl BenchmarkReport {
    pub fn correlation(&self, scope: &str, source_tag: &str, metric: ShiftMetric) -> Option<&CorrelationRecord> {
        self.correlations
            .iter()
            .find(|c| c.scope == scope && c.source_tag == source_tag && c.metric == metric)
    }

    pub fn ttest(&self, source_tag: &str, comparison: &str) -> Option<&TTestRecord> {
        self.ttests
            .iter()
            .find(|t| t.source_tag == source_tag && t.comparison == comparison)
    }

    pub fn median(&self, session: &str, split: &str, source_tag: &str) -> Option<f64> {
        self.split_scores
            .iter()
            .find(|s| s.session == session && s.split == split && s.source_tag == source_tag)
            .and_then(|s| s.median_score)
    }

    /// `report.json` plus the flat CSV tables.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json_path = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: json_path.display().to_string(),
            source,
        })?;
        fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

        write_csv(
            &dir.join("ratios.csv"),
            &["session", "source_tag", "split", "baseline", "ood_median", "ind_median", "ratio"],
            self.ratios.iter().map(|r| {
                vec![
                    r.session.clone(),
                    r.source_tag.clone(),
                    r.split.clone(),
                    r.baseline.clone(),
                    fmt_f(r.ood_median),
                    fmt_f(r.ind_median),
                    fmt_f(r.ratio),
                ]
            }),
        )?;

        let by_key: BTreeMap<Key, &ShiftMeasurement> = self
            .measurements
            .iter()
            .map(|m| (key(&m.session, &m.split, &m.source_tag), m))
            .collect();
        write_csv(
            &dir.join("distance_vs_score.csv"),
            &[
                "session",
                "source_tag",
                "split",
                "family",
                "ccd",
                "mmd_squared",
                "covariate_shift",
                "classifier_accuracy",
                "median_score",
            ],
            self.split_scores.iter().map(|s| {
                let m = by_key.get(&key(&s.session, &s.split, &s.source_tag));
                vec![
                    s.session.clone(),
                    s.source_tag.clone(),
                    s.split.clone(),
                    s.family.name().to_string(),
                    fmt_opt(m.and_then(|m| m.ccd)),
                    fmt_opt(m.and_then(|m| m.mmd_squared)),
                    fmt_opt(m.and_then(|m| m.covariate_shift)),
                    fmt_opt(m.and_then(|m| m.classifier_accuracy)),
                    fmt_opt(s.median_score),
                ]
            }),
        )?;

        write_csv(
            &dir.join("metric_correlations.csv"),
            &["scope", "source_tag", "metric", "n", "rho", "p"],
            self.correlations.iter().map(|c| {
                vec![
                    c.scope.clone(),
                    c.source_tag.clone(),
                    c.metric.name().to_string(),
                    c.n.to_string(),
                    fmt_opt(c.rho),
                    fmt_opt(c.p),
                ]
            }),
        )?;

        write_csv(
            &dir.join("ttests.csv"),
            &["source_tag", "comparison", "n", "mean_diff", "t", "p", "degenerate", "n_dropped"],
            self.ttests.iter().map(|t| {
                let r = t.result;
                vec![
                    t.source_tag.clone(),
                    t.comparison.clone(),
                    r.map(|r| r.n.to_string()).unwrap_or_default(),
                    fmt_opt(r.map(|r| r.mean_diff)),
                    fmt_opt(r.map(|r| r.t)),
                    fmt_opt(r.map(|r| r.p)),
                    r.map(|r| r.degenerate.to_string()).unwrap_or_default(),
                    t.n_dropped.to_string(),
                ]
            }),
        )?;

        let summary_rows = |kind: &'static str, rows: &[Summary]| -> Vec<Vec<String>> {
            rows.iter()
                .map(|s| {
                    vec![
                        kind.to_string(),
                        s.split.clone(),
                        s.source_tag.clone(),
                        s.n.to_string(),
                        fmt_f(s.mean),
                        fmt_f(s.sem),
                    ]
                })
                .collect()
        };
        let mut rows = summary_rows("score", &self.score_summary);
        rows.extend(summary_rows("ratio", &self.ratio_summary));
        write_csv(
            &dir.join("score_summary.csv"),
            &["quantity", "split", "source_tag", "n", "mean", "sem"],
            rows,
        )
    }
}

/// Per-neuron rows `session,split,source_tag,neuron,lambda,r_pred,r_cons,score,flags`.
pub fn write_encoding_csv(path: &Path, rows: &[(String, String, String, EncodingResult)]) -> Result<()> {
    write_csv(
        path,
        &["session", "split", "source_tag", "neuron", "lambda", "r_pred", "r_cons", "score", "flags"],
        rows.iter().map(|(session, split, tag, r)| {
            vec![
                session.clone(),
                split.clone(),
                tag.clone(),
                r.neuron.to_string(),
                fmt_opt(r.lambda),
                fmt_opt(r.r_pred),
                fmt_opt(r.r_cons),
                fmt_opt(r.score),
                r.flags.iter().map(|f| f.name()).collect::<Vec<_>>().join("|"),
            ]
        }),
    )
}
