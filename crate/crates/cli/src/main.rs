use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::{error, info};

use oodbench::analysis::{write_encoding_csv, SplitFamily, SplitScore};
use oodbench::attributes::compute_all;
use oodbench::data::{load_session, write_attribute_csv, SessionDataset};
use oodbench::encoder::{fit_session, EncoderConfig};
use oodbench::pipeline::{
    analyze_run, encoder_seed, plan_splits, run_pipeline, shift_seed, write_json, RunConfig, SplitSpec,
};
use oodbench::shift::{measure_split, ShiftConfig};
use oodbench::splits::{Provenance, SplitAssignment};
use oodbench::synth::{generate_session, SynthConfig};

/// Out-of-distribution benchmark for linear neural encoding models.
///
/// Log verbosity follows the OODBENCH_LOG environment variable
/// (error, warn, info, debug, trace); the default is info.
#[derive(Parser)]
#[command(name = "oodbench", version)]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute image attributes of a session and write them as CSV.
    Attributes {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write every split of a session as JSON files.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config supplying the split settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Features that define distance splits.
        #[arg(long)]
        source_tag: Option<String>,
    },
    /// Shift metrics of one split, written as JSON.
    Shift {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        source_tag: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit and score every neuron on one split, written as CSV.
    Fit {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        source_tag: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rebuild the report of an earlier run directory.
    Analyze {
        /// Output directory of `run`.
        #[arg(long)]
        run: PathBuf,
        /// Where to write the report; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic session with known ground truth.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Full pipeline over every session of a run config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Split and encoder settings from a run config when given, else defaults.
fn settings(config: Option<&Path>, seed: Option<u64>) -> anyhow::Result<(SplitSpec, EncoderConfig, ShiftConfig, u64)> {
    let (spec, enc, shift, config_seed) = match config {
        Some(p) => {
            let c = RunConfig::read(p)?;
            (c.splits, c.encoder, c.shift, c.seed)
        }
        None => Default::default(),
    };
    let seed = seed.or(config_seed).context("a seed is required (--seed or the config's seed)")?;
    Ok((spec, enc, shift, seed))
}

fn family_of(split: &SplitAssignment) -> SplitFamily {
    match split.provenance {
        Provenance::Random { .. } => SplitFamily::Ind,
        Provenance::Attribute { .. } => SplitFamily::Attribute,
        Provenance::Distance { .. } => SplitFamily::Distance,
    }
}

fn first_tag(session: &SessionDataset) -> anyhow::Result<String> {
    session
        .features
        .keys()
        .next()
        .cloned()
        .context("session has no feature matrices")
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    if let Some(w) = cli.workers {
        if !matches!(cli.command, Command::Run { .. }) {
            rayon_pool(w)?;
        }
    }
    match cli.command {
        Command::Attributes { manifest, out } => {
            let mut session = load_session(&manifest)?;
            let table = compute_all(&mut session)?;
            write_attribute_csv(&out, &table)?;
            info!("wrote {} attribute rows to {}", table.len(), out.display());
        }
        Command::Split {
            manifest,
            out,
            config,
            seed,
            source_tag,
        } => {
            let (splits, encoder, shift, seed) = settings(config.as_deref(), seed)?;
            let mut session = load_session(&manifest)?;
            let tag = match source_tag.or_else(|| splits.distance.source_tag.clone()) {
                Some(t) => t,
                None => first_tag(&session)?,
            };
            let run = RunConfig {
                sessions: vec![manifest],
                source_tags: vec![tag],
                splits,
                encoder,
                shift,
                seed: Some(seed),
                output_dir: out.clone(),
            };
            run.validate()?;
            let planned = plan_splits(&mut session, &run, seed)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for p in &planned {
                p.split.write_json(&out.join(format!("{}.json", p.split.name)))?;
            }
            info!("wrote {} splits to {}", planned.len(), out.display());
        }
        Command::Shift {
            manifest,
            split,
            source_tag,
            out,
            config,
            seed,
        } => {
            let (_, _, shift, seed) = settings(config.as_deref(), seed)?;
            let session = load_session(&manifest)?;
            let split = SplitAssignment::read_json(&split)?;
            let features = session.feature(&source_tag)?;
            let s = shift_seed(seed, &session.session_id, &split.name, &source_tag);
            let m = measure_split(&session.session_id, features, &split, &shift, s)?;
            write_json(&out, &m)?;
        }
        Command::Fit {
            manifest,
            split,
            source_tag,
            out,
            config,
            seed,
        } => {
            let (_, encoder, _, seed) = settings(config.as_deref(), seed)?;
            let session = load_session(&manifest)?;
            let split = SplitAssignment::read_json(&split)?;
            let s = encoder_seed(seed, &session.session_id, &split.name, &source_tag);
            let results = fit_session(&session, &split, &source_tag, &encoder, s)?;
            let score =
                SplitScore::from_results(&session.session_id, &split.name, &source_tag, family_of(&split), &results);
            let rows: Vec<_> = results
                .into_iter()
                .map(|r| (session.session_id.clone(), split.name.clone(), source_tag.clone(), r))
                .collect();
            write_encoding_csv(&out, &rows)?;
            match score.median_score {
                Some(m) => info!("median score {m:.4} over {} reliable neurons", score.n_reliable),
                None => info!("no reliable neurons"),
            }
        }
        Command::Analyze { run, out } => {
            let report = analyze_run(&run)?;
            let out = out.unwrap_or(run);
            report.write(&out)?;
        }
        Command::Synth { config, out, seed } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut c: SynthConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            if let Some(s) = seed {
                c.seed = s;
            }
            let session = generate_session(&c)?;
            let manifest = session.write(&out)?;
            info!("wrote {}", manifest.display());
        }
        Command::Run { config, out, seed } => {
            let mut c = RunConfig::read(&config)?;
            if let Some(o) = out {
                c.output_dir = o;
            }
            if seed.is_some() {
                c.seed = seed;
            }
            let result = run_pipeline(&c, cli.workers)?;
            if !result.failures.is_empty() {
                error!("{} of {} sessions failed", result.failures.len(), c.sessions.len());
            }
            info!(
                "{} sessions, {} split scores written to {}",
                result.succeeded.len(),
                result.report.split_scores.len(),
                c.output_dir.display()
            );
        }
    }
    Ok(())
}

fn rayon_pool(workers: usize) -> anyhow::Result<()> {
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .context("configuring worker pool")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OODBENCH_LOG", "info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
