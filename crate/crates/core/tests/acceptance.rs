//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each, and
//! exits non-zero if any failed.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use oodbench::analysis::{t_quantile, BenchmarkReport, ShiftMetric, REPORT_CSVS};
use oodbench::data::FeatureMatrix;
use oodbench::encoder::{ceiling, fit_fixed};
use oodbench::pipeline::{run_pipeline, RunConfig, SplitSpec};
use oodbench::shift::{ccd, covariate_shift, mmd_squared, Bandwidth, ClassifierConfig};
use oodbench::splits::{attribute_split, distance_split, HoldOutStrategy, PercentileCuts, SeedImage};
use oodbench::stats::{mean, sem};
use oodbench::synth::{generate_session, SynthConfig};

const TAG: &str = "synth/features";

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("took {:.2}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()),
    )
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rows(data: &[Vec<f64>]) -> Vec<&[f64]> {
    data.iter().map(Vec::as_slice).collect()
}

/// Linear-interpolation percentile, computed independently of the library.
fn oracle_percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * p / 100.0;
    let i = h as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] + (h - i as f64) * (v[i + 1] - v[i])
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let values: Vec<f64> = (0..1000).map(|_| rng.random::<f64>() * 10.0 - 3.0).collect();
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    ensure(sorted.len() == 1000, "sample has ties")?;

    let cuts = PercentileCuts::default();
    let mut counts = BTreeMap::new();
    for strategy in HoldOutStrategy::ALL {
        let s = attribute_split(&values, strategy, cuts).map_err(|e| e.to_string())?;
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).chain(&s.discarded).copied().collect();
        all.sort_unstable();
        ensure(all == (0..1000).collect::<Vec<_>>(), format!("{strategy}: not a partition"))?;
        counts.insert(strategy, s.test.len());
    }
    let high = counts[&HoldOutStrategy::High];
    let low = counts[&HoldOutStrategy::Low];
    let mid = counts[&HoldOutStrategy::Mid];
    ensure(high.abs_diff(250) <= 1, format!("high |test| = {high}"))?;
    ensure(low.abs_diff(250) <= 1, format!("low |test| = {low}"))?;
    let (lo, hi) = (oracle_percentile(&values, 42.5), oracle_percentile(&values, 62.5));
    let expected_mid = values.iter().filter(|&&v| v > lo && v < hi).count();
    ensure(mid == expected_mid, format!("mid |test| = {mid}, cuts imply {expected_mid}"))?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("|test| high {high}, low {low}, mid {mid} (expected {expected_mid})"))
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data: Vec<f64> = (0..100 * 8).map(|_| normal(&mut rng) + 0.5).collect();
    let features = FeatureMatrix::new(TAG, 100, 8, data).map_err(|e| e.to_string())?;
    for seed in 0..5u64 {
        let d = distance_split(&features, SeedImage::Random, seed).map_err(|e| e.to_string())?;
        let chunk1 = d.train.len() + d.ind_test.len();
        let sizes = (chunk1, d.discarded.len(), d.near_ood.len(), d.far_ood.len());
        ensure(sizes == (80, 10, 5, 5), format!("chunk sizes {sizes:?}"))?;
        ensure(d.ind_test.len() == 5 && d.train.len() == 75, "InD test / train sizes")?;
        let rank = d.ranks();
        ensure(rank[d.seed_image] == 0, "seed image is not rank 0")?;
        let max_rank = |set: &[usize]| set.iter().map(|&i| rank[i]).max().unwrap();
        let min_rank = |set: &[usize]| set.iter().map(|&i| rank[i]).min().unwrap();
        let chunk1_max = max_rank(&d.train).max(max_rank(&d.ind_test));
        ensure(chunk1_max < min_rank(&d.discarded), "chunk1 overlaps discard band")?;
        ensure(max_rank(&d.discarded) < min_rank(&d.near_ood), "discard overlaps near")?;
        ensure(max_rank(&d.near_ood) < min_rank(&d.far_ood), "near overlaps far")?;
        for w in d.order.windows(2) {
            ensure(d.distances[w[0]] <= d.distances[w[1]], "order is not sorted by distance")?;
        }
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok("80/10/5/5 chunks, |InD| = |near| = 5, ranks ordered over 5 seeds".into())
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let gaussian = |rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| normal(rng) + shift).collect()).collect()
    };

    let train = gaussian(&mut rng, 200, 6, 0.0);
    let subset: Vec<Vec<f64>> = train.iter().step_by(3).cloned().collect();
    let c = ccd(&rows(&train), &rows(&subset)).map_err(|e| e.to_string())?;
    ensure(c == 0.0, format!("ccd(test in train) = {c:e}"))?;

    let m = mmd_squared(&rows(&train), &rows(&train), Bandwidth::Median).map_err(|e| e.to_string())?;
    ensure(m.mmd_squared.abs() <= 1e-9, format!("mmd(D, D) = {:e}", m.mmd_squared))?;

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
        let y: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
        let sigma = 0.5 + rng.random::<f64>() * 2.0;
        let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        let expected = 2.0 - 2.0 * (-d2 / (2.0 * sigma * sigma)).exp();
        let got = mmd_squared(&[x.as_slice()], &[y.as_slice()], Bandwidth::Fixed(sigma))
            .map_err(|e| e.to_string())?
            .mmd_squared;
        worst = worst.max((got - expected).abs());
    }
    ensure(worst <= 1e-12, format!("singleton mmd off by {worst:e}"))?;

    let a = gaussian(&mut rng, 2000, 5, 0.0);
    let b = gaussian(&mut rng, 2000, 5, 0.0);
    let same = covariate_shift(&rows(&a), &rows(&b), 31, ClassifierConfig::default()).map_err(|e| e.to_string())?;
    ensure(same.covariate_shift < 0.1, format!("cov on identical = {}", same.covariate_shift))?;
    let far = gaussian(&mut rng, 2000, 5, 4.0);
    let apart = covariate_shift(&rows(&a), &rows(&far), 32, ClassifierConfig::default()).map_err(|e| e.to_string())?;
    ensure(apart.covariate_shift > 0.9, format!("cov on separated = {}", apart.covariate_shift))?;
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "ccd 0, mmd(D,D) {:.1e}, singleton err {worst:.1e}, cov same {:.3} / separated {:.3}",
        m.mmd_squared, same.covariate_shift, apart.covariate_shift
    ))
}

/// Solve `a x = b` by Gaussian elimination with partial pivoting.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn criterion_4() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(3..=20);
        let d = rng.random_range(1..=5);
        let lambda = 10f64.powf(rng.random_range(-3.0..3.0));
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| 3.0 * normal(&mut rng) + 1.0).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| 5.0 + 2.0 * normal(&mut rng)).collect();

        // independent standardization: train mean, population sd
        let mut z = vec![vec![0.0; d]; n];
        for j in 0..d {
            let m = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let sd = (x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            for i in 0..n {
                z[i][j] = (x[i][j] - m) / sd;
            }
        }
        let ym = y.iter().sum::<f64>() / n as f64;
        let mut ztz = vec![vec![0.0; d]; d];
        let mut zty = vec![0.0; d];
        for i in 0..n {
            for a in 0..d {
                zty[a] += z[i][a] * (y[i] - ym);
                for b in 0..d {
                    ztz[a][b] += z[i][a] * z[i][b];
                }
            }
        }
        for (a, row) in ztz.iter_mut().enumerate() {
            row[a] += lambda;
        }
        let expected = gauss_solve(ztz, zty);

        let xm = DMatrix::from_fn(n, d, |i, j| x[i][j]);
        let model = fit_fixed(&xm, &y, lambda).map_err(|e| e.to_string())?;
        for (w, e) in model.weights.iter().zip(&expected) {
            worst = worst.max((w - e).abs() / e.abs().max(1.0));
        }
        worst = worst.max((model.intercept - ym).abs());
    }
    ensure(worst <= 1e-8, format!("max deviation {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("50 instances, max deviation {worst:.1e}"))
}

fn criterion_5() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (images, trials, signal, noise) = (1000, 4, 1.0, 1.5);
    let mu: Vec<f64> = (0..images).map(|_| signal * normal(&mut rng)).collect();
    let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        mu.iter()
            .map(|m| (0..trials).map(|_| m + noise * normal(rng)).collect())
            .collect()
    };
    let observed = draw(&mut rng);
    let got = ceiling(&observed, 20, 5).map_err(|e| e.to_string())?;
    let r_cons = got.r_cons.ok_or("ceiling undefined")?;

    // Monte-Carlo oracle: correlation between two independent T-trial means
    let pearson = |a: &[f64], b: &[f64]| {
        let (ma, mb) = (mean(a), mean(b));
        let sab: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let saa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let sbb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        sab / (saa * sbb).sqrt()
    };
    let replicates = 200;
    let mut acc = 0.0;
    for _ in 0..replicates {
        let a: Vec<f64> = draw(&mut rng).iter().map(|t| mean(t)).collect();
        let b: Vec<f64> = draw(&mut rng).iter().map(|t| mean(t)).collect();
        acc += pearson(&a, &b);
    }
    let oracle = acc / replicates as f64;
    let analytic = signal * signal / (signal * signal + noise * noise / trials as f64);
    ensure(
        (r_cons - oracle).abs() <= 0.05,
        format!("r_cons {r_cons:.4} vs oracle {oracle:.4}"),
    )?;

    let noiseless: Vec<Vec<f64>> = mu.iter().map(|m| vec![*m; trials]).collect();
    let one = ceiling(&noiseless, 20, 6).map_err(|e| e.to_string())?;
    ensure(one.r_cons == Some(1.0), format!("noiseless ceiling {:?}", one.r_cons))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "r_cons {r_cons:.4}, Monte-Carlo {oracle:.4}, analytic {analytic:.4}; noiseless exactly 1"
    ))
}

struct BenchmarkRun {
    report: BenchmarkReport,
    elapsed: Duration,
    sessions: usize,
    _dir: tempfile::TempDir,
}

fn write_sessions(dir: &std::path::Path, configs: &[SynthConfig]) -> Vec<PathBuf> {
    configs
        .iter()
        .map(|c| {
            let s = generate_session(c).expect("valid synth config");
            s.write(&dir.join(&c.session_id)).expect("writable session directory")
        })
        .collect()
}

fn run_config(sessions: Vec<PathBuf>, output_dir: PathBuf, seed: u64) -> RunConfig {
    RunConfig {
        sessions,
        source_tags: vec![TAG.into()],
        splits: SplitSpec::default(),
        encoder: Default::default(),
        shift: Default::default(),
        seed: Some(seed),
        output_dir,
    }
}

fn nonlinear_benchmark() -> Result<BenchmarkRun, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let configs: Vec<SynthConfig> = (0..30)
        .map(|i| SynthConfig::nonlinear(format!("session-{i:02}"), 7000 + i))
        .collect();
    let manifests = write_sessions(dir.path(), &configs);
    let config = run_config(manifests, dir.path().join("out"), 2718);
    let out = run_pipeline(&config, None).map_err(|e| e.to_string())?;
    ensure(out.failures.is_empty(), format!("{} sessions failed", out.failures.len()))?;
    Ok(BenchmarkRun {
        report: out.report,
        elapsed: start.elapsed(),
        sessions: out.succeeded.len(),
        _dir: dir,
    })
}

fn criterion_6(run: &BenchmarkRun) -> Check {
    let r = &run.report;
    let mean_of = |split: &str| {
        r.score_summary
            .iter()
            .find(|s| s.split == split && s.source_tag == TAG)
            .map(|s| s.mean)
            .ok_or(format!("no summary for {split}"))
    };
    let (ind, near, far) = (mean_of("distance-ind")?, mean_of("distance-near")?, mean_of("distance-far")?);
    ensure(ind > near && near > far, format!("ordering InD {ind:.3}, Near {near:.3}, Far {far:.3}"))?;
    let mut ps = Vec::new();
    for cmp in ["distance-ind vs distance-near", "distance-near vs distance-far"] {
        let t = r.ttest(TAG, cmp).and_then(|t| t.result).ok_or(format!("no t-test for {cmp}"))?;
        ensure(t.mean_diff > 0.0 && t.p < 0.01, format!("{cmp}: t {:.2}, p {:.2e}", t.t, t.p))?;
        ps.push(t.p);
    }
    within(run.elapsed, Duration::from_secs(300))?;
    Ok(format!(
        "{} sessions: InD {ind:.3} > Near {near:.3} > Far {far:.3}; p = {:.1e}, {:.1e}; {:.0}s",
        run.sessions,
        ps[0],
        ps[1],
        run.elapsed.as_secs_f64()
    ))
}

fn criterion_7(run: &BenchmarkRun) -> Check {
    let c = run
        .report
        .correlation("distance", TAG, ShiftMetric::Ccd)
        .ok_or("no ccd correlation over distance splits")?;
    let rho = c.rho.ok_or("correlation undefined")?;
    ensure(rho < -0.3, format!("rho {rho:.3} over {} points", c.n))?;
    Ok(format!("Spearman rho(ccd, score) = {rho:.3} over {} points, p = {:.1e}", c.n, c.p.unwrap_or(f64::NAN)))
}

fn criterion_8(run: &BenchmarkRun) -> Check {
    // one value per session (its mean attribute ratio), so sessions are the
    // independent units behind the confidence bound
    let mut by_session: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in run.report.ratios.iter().filter(|r| r.baseline == "ind") {
        by_session.entry(&r.session).or_default().push(r.ratio);
    }
    let per_session: Vec<f64> = by_session.values().map(|v| mean(v)).collect();
    let n_ratios: usize = by_session.values().map(Vec::len).sum();
    ensure(per_session.len() >= 2, "too few sessions with attribute ratios")?;
    let m = mean(&per_session);
    let upper = m + t_quantile(0.95, (per_session.len() - 1) as f64) * sem(&per_session);
    ensure(upper < 1.0, format!("mean {m:.3}, upper 95% bound {upper:.3}"))?;
    within(run.elapsed, Duration::from_secs(300))?;
    Ok(format!(
        "mean OOD/InD ratio {m:.3}, one-sided 95% upper bound {upper:.3} ({n_ratios} ratios, {} sessions)",
        per_session.len()
    ))
}

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let configs: Vec<SynthConfig> = (0..3)
        .map(|i| SynthConfig {
            n_images: 300,
            n_neurons: 12,
            ..SynthConfig::nonlinear(format!("det-{i}"), 90 + i)
        })
        .collect();
    let manifests = write_sessions(dir.path(), &configs);
    let read_all = |out: &std::path::Path| -> Result<Vec<(String, Vec<u8>)>, String> {
        let mut files: Vec<String> = REPORT_CSVS.iter().map(|s| s.to_string()).collect();
        files.push("encoding.csv".into());
        files
            .into_iter()
            .map(|f| fs::read(out.join(&f)).map(|b| (f, b)).map_err(|e| e.to_string()))
            .collect()
    };
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        run_pipeline(&run_config(manifests.clone(), out.clone(), 99), Some(2)).map_err(|e| e.to_string())?;
        outputs.push(read_all(&out)?);
    }
    for ((name, a), (_, b)) in outputs[0].iter().zip(&outputs[1]) {
        ensure(a == b, format!("{name} differs between runs"))?;
    }
    Ok(format!("{} CSV files byte-identical across two runs", outputs[0].len()))
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Check)> = vec![
        (1, "split laws", guarded(criterion_1)),
        (2, "distance-split geometry", guarded(criterion_2)),
        (3, "shift-metric oracles", guarded(criterion_3)),
        (4, "ridge closed form", guarded(criterion_4)),
        (5, "ceiling calibration", guarded(criterion_5)),
    ];
    let bench = panic::catch_unwind(nonlinear_benchmark).unwrap_or_else(|_| Err("benchmark run panicked".into()));
    match &bench {
        Ok(run) => {
            results.push((6, "InD > Near > Far", guarded(|| criterion_6(run))));
            results.push((7, "shift predicts score", guarded(|| criterion_7(run))));
            results.push((8, "attribute OOD/InD ratio < 1", guarded(|| criterion_8(run))));
        }
        Err(e) => {
            for (id, name) in [(6, "InD > Near > Far"), (7, "shift predicts score"), (8, "attribute OOD/InD ratio < 1")] {
                results.push((id, name, Err(format!("benchmark run failed: {e}"))));
            }
        }
    }
    results.push((9, "determinism", guarded(criterion_9)));

    let mut failed = 0;
    for (id, name, r) in &results {
        match r {
            Ok(detail) => println!("criterion {id} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
