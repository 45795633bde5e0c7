//! `dcdet` — batch command-line surface for the dual-attention anomaly
//! detector.
//!
//! Subcommands compose the library pipeline end-to-end: `synth` emits a
//! labeled synthetic series, `train` fits a detector and writes a
//! checkpoint, `score` turns a checkpoint plus a series into per-timestamp
//! anomaly scores and decisions, `eval` grades decisions against ground
//! truth, and `run-benchmark` chains all four for every spec in a
//! directory.
//!
//! Exit-code contract (fixed for CI scripting):
//! * `0` — success
//! * `2` — usage or validation failure (bad flags, malformed files,
//!   incompatible configuration)
//! * `3` — numeric failure (NaN/Inf mid-training or mid-scoring)
//!
//! Every failure prints exactly one `error: ...` line on stderr. All
//! subcommands are pure functions of (flags, input files, seed): re-running
//! produces byte-identical outputs except wall-clock fields in logs and
//! reports. The `DCDET_SEED` environment variable, when set, overrides the
//! training seed from any config so CI can pin runs without editing files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dcdetector::{
    apply_threshold, checkpoint_load, checkpoint_save, compute_metrics, generate, load_csv,
    load_label_csv, read_scores_csv, score_dataset, train, write_labels_csv, write_scores_csv,
    write_values_csv, Error, MetricsReport, Result, SynthSpec, ThresholdMode, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "dcdet",
    version,
    about = "Dual-attention contrastive anomaly detection for multivariate time series",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled series from a JSON spec.
    ///
    /// Writes three files: `<PREFIX>_values.csv`, `<PREFIX>_labels.csv`,
    /// and `<PREFIX>_spec.json` (the parsed spec echoed back with defaults
    /// filled in).
    Synth {
        /// Path to a generator spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output path prefix for the three emitted files.
        #[arg(long)]
        out_prefix: String,
    },
    /// Train a detector on a values CSV and write a checkpoint.
    Train {
        /// Training series (CSV, one row per timestamp).
        #[arg(long)]
        data: PathBuf,
        /// Training configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path (a sibling `.bin` blob is written too).
        #[arg(long)]
        out: PathBuf,
        /// Benchmark preset name; overrides the config's `preset` field.
        #[arg(long)]
        preset: Option<String>,
        /// Optional per-step training log (CSV).
        #[arg(long)]
        runlog: Option<PathBuf>,
        /// Treat the first data row as a header.
        #[arg(long)]
        has_header: bool,
    },
    /// Score a series with a trained checkpoint and write decisions.
    Score {
        /// Checkpoint path written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Series to score (CSV, one row per timestamp).
        #[arg(long)]
        data: PathBuf,
        /// Output CSV: `timestamp,score,decision`.
        #[arg(long)]
        out: PathBuf,
        /// How the alarm threshold is chosen.
        #[arg(long, value_enum, default_value_t = ThresholdModeArg::Absolute)]
        threshold_mode: ThresholdModeArg,
        /// Anomaly ratio for `--threshold-mode quantile` (0 < R < 1).
        #[arg(long)]
        ratio: Option<f64>,
        /// Threshold value for `--threshold-mode absolute` (default 1).
        #[arg(long)]
        delta: Option<f64>,
        /// Windows per forward pass while scoring.
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        /// Treat the first data row as a header.
        #[arg(long)]
        has_header: bool,
    },
    /// Grade a score CSV against a labels CSV and write a JSON report.
    Eval {
        /// Score CSV written by `score`.
        #[arg(long)]
        scores: PathBuf,
        /// Ground-truth labels CSV (one 0/1 per line).
        #[arg(long)]
        labels: PathBuf,
        /// Apply point adjustment before counting.
        #[arg(long)]
        adjust: bool,
        /// Metrics report output path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run synth -> train -> score -> eval for every spec in a directory.
    ///
    /// Scans `--spec-suite` for `*.json` files (sorted by name). Failures
    /// are recorded per spec and the suite continues.
    RunBenchmark {
        /// Directory of benchmark specs.
        #[arg(long)]
        spec_suite: PathBuf,
        /// Aggregated JSON report output path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ThresholdModeArg {
    /// Alarm when score >= the (1 - ratio) quantile of the scores.
    Quantile,
    /// Alarm when score >= a fixed delta.
    Absolute,
}

/// One end-to-end benchmark case: a generator spec plus a training
/// configuration, thresholded at `threshold_ratio` (default: the generated
/// series' true anomaly ratio) and graded with point adjustment unless
/// `adjust` says otherwise.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchmarkSpec {
    synth: SynthSpec,
    train: TrainConfig,
    #[serde(default)]
    threshold_ratio: Option<f64>,
    #[serde(default = "default_true")]
    adjust: bool,
}

fn default_true() -> bool {
    true
}

/// Per-spec entry in the aggregated benchmark report. `error` is `null`
/// for successful specs; failed specs keep their name and error message so
/// the suite result stays complete.
#[derive(Serialize)]
struct BenchmarkEntry {
    name: String,
    error: Option<String>,
    metrics: Option<MetricsReport>,
    threshold: Option<f64>,
    threshold_ratio: Option<f64>,
    train_seconds: Option<f64>,
    total_seconds: f64,
}

#[derive(Serialize)]
struct BenchmarkReport {
    passed: usize,
    failed: usize,
    entries: Vec<BenchmarkEntry>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("error");
            eprintln!("{first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, out_prefix } => cmd_synth(&spec, &out_prefix),
        Command::Train { data, config, out, preset, runlog, has_header } => {
            cmd_train(&data, &config, &out, preset, runlog.as_deref(), has_header)
        }
        Command::Score {
            model,
            data,
            out,
            threshold_mode,
            ratio,
            delta,
            batch_size,
            has_header,
        } => {
            let mode = threshold_mode.resolve(ratio, delta)?;
            cmd_score(&model, &data, &out, mode, batch_size, has_header)
        }
        Command::Eval { scores, labels, adjust, out } => cmd_eval(&scores, &labels, adjust, &out),
        Command::RunBenchmark { spec_suite, out } => cmd_run_benchmark(&spec_suite, &out),
    }
}

impl ThresholdModeArg {
    /// Combines the mode with its value flag, rejecting flag combinations
    /// that would silently ignore user input.
    fn resolve(self, ratio: Option<f64>, delta: Option<f64>) -> Result<ThresholdMode> {
        match self {
            ThresholdModeArg::Quantile => {
                if delta.is_some() {
                    return Err(Error::Config(
                        "--delta only applies to --threshold-mode absolute".into(),
                    ));
                }
                let ratio = ratio.ok_or_else(|| {
                    Error::Config("--ratio is required with --threshold-mode quantile".into())
                })?;
                Ok(ThresholdMode::Quantile { ratio })
            }
            ThresholdModeArg::Absolute => {
                if ratio.is_some() {
                    return Err(Error::Config(
                        "--ratio only applies to --threshold-mode quantile".into(),
                    ));
                }
                Ok(ThresholdMode::Absolute { delta: delta.unwrap_or(1.0) })
            }
        }
    }
}

// ---- subcommands -----------------------------------------------------------

fn cmd_synth(spec_path: &Path, out_prefix: &str) -> Result<()> {
    let spec: SynthSpec = read_json(spec_path)?;
    spec.validate()?;
    let ds = generate(&spec)?;
    let labels = ds.labels.clone().ok_or_else(|| {
        Error::Domain("generator produced no labels; cannot write the labels file".into())
    })?;

    let values_path = PathBuf::from(format!("{out_prefix}_values.csv"));
    let labels_path = PathBuf::from(format!("{out_prefix}_labels.csv"));
    let sidecar_path = PathBuf::from(format!("{out_prefix}_spec.json"));
    ensure_parent(&values_path)?;
    write_values_csv(&values_path, &ds)?;
    write_labels_csv(&labels_path, &labels)?;
    write_json(&sidecar_path, &spec)?;

    let marked = labels.iter().filter(|&&l| l).count();
    println!(
        "wrote {} ({} timestamps x {} channels), {} ({} anomalous), {}",
        values_path.display(),
        ds.num_timestamps,
        ds.num_channels,
        labels_path.display(),
        marked,
        sidecar_path.display()
    );
    Ok(())
}

fn cmd_train(
    data: &Path,
    config: &Path,
    out: &Path,
    preset: Option<String>,
    runlog: Option<&Path>,
    has_header: bool,
) -> Result<()> {
    let mut cfg: TrainConfig = read_json(config)?;
    if preset.is_some() {
        cfg.preset = preset;
    }
    apply_seed_override(&mut cfg)?;
    let ds = load_csv(data, has_header, None)?;
    let (model, log) = train(&ds, &cfg)?;
    ensure_parent(out)?;
    checkpoint_save(&model, out)?;
    if let Some(path) = runlog {
        ensure_parent(path)?;
        log.write_csv(path)?;
    }
    let last = log.steps.last();
    println!(
        "trained {} epochs ({} steps, final loss_p {:.6}, loss_n {:.6}); checkpoint {}",
        log.epoch_seconds.len(),
        log.steps.len(),
        last.map_or(f64::NAN, |s| s.loss_p),
        last.map_or(f64::NAN, |s| s.loss_n),
        out.display()
    );
    Ok(())
}

fn cmd_score(
    model_path: &Path,
    data: &Path,
    out: &Path,
    mode: ThresholdMode,
    batch_size: usize,
    has_header: bool,
) -> Result<()> {
    let model = checkpoint_load(model_path)?;
    let ds = load_csv(data, has_header, None)?;
    let scores = score_dataset(&model, &ds, batch_size)?;
    let series = apply_threshold(&scores, mode)?;
    ensure_parent(out)?;
    write_scores_csv(out, &series)?;
    let alarms = series.decisions.iter().filter(|&&d| d).count();
    println!(
        "scored {} timestamps (threshold {}, {} alarms); scores {}",
        series.scores.len(),
        series.threshold,
        alarms,
        out.display()
    );
    Ok(())
}

fn cmd_eval(scores: &Path, labels: &Path, adjust: bool, out: &Path) -> Result<()> {
    let (_, decisions) = read_scores_csv(scores)?;
    let gt = load_label_csv(labels, false)?;
    let report = compute_metrics(&decisions, &gt, adjust)?;
    ensure_parent(out)?;
    write_json(out, &report)?;
    println!(
        "precision {:.4} recall {:.4} f1 {:.4} (adjusted: {}); report {}",
        report.precision,
        report.recall,
        report.f1,
        report.adjusted,
        out.display()
    );
    Ok(())
}

fn cmd_run_benchmark(suite_dir: &Path, out: &Path) -> Result<()> {
    let mut spec_paths: Vec<PathBuf> = fs::read_dir(suite_dir)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", suite_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    spec_paths.sort();
    if spec_paths.is_empty() {
        return Err(Error::Config(format!(
            "no benchmark specs (*.json) found in {}",
            suite_dir.display()
        )));
    }

    let mut entries = Vec::with_capacity(spec_paths.len());
    for path in &spec_paths {
        let name = path
            .file_stem()
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        let started = Instant::now();
        let entry = match run_benchmark_spec(path) {
            Ok(done) => {
                println!("{name}: f1 {:.4} (threshold {})", done.metrics.f1, done.threshold);
                BenchmarkEntry {
                    name,
                    error: None,
                    metrics: Some(done.metrics),
                    threshold: Some(done.threshold),
                    threshold_ratio: Some(done.threshold_ratio),
                    train_seconds: Some(done.train_seconds),
                    total_seconds: started.elapsed().as_secs_f64(),
                }
            }
            Err(e) => {
                println!("{name}: failed ({e})");
                BenchmarkEntry {
                    name,
                    error: Some(e.to_string()),
                    metrics: None,
                    threshold: None,
                    threshold_ratio: None,
                    train_seconds: None,
                    total_seconds: started.elapsed().as_secs_f64(),
                }
            }
        };
        entries.push(entry);
    }

    let report = BenchmarkReport {
        passed: entries.iter().filter(|e| e.error.is_none()).count(),
        failed: entries.iter().filter(|e| e.error.is_some()).count(),
        entries,
    };
    ensure_parent(out)?;
    write_json(out, &report)?;
    println!("{} passed, {} failed; report {}", report.passed, report.failed, out.display());
    Ok(())
}

struct BenchmarkOutcome {
    metrics: MetricsReport,
    threshold: f64,
    threshold_ratio: f64,
    train_seconds: f64,
}

/// Runs one spec end-to-end in memory: generate, train, score the same
/// series, grade against its labels.
fn run_benchmark_spec(path: &Path) -> Result<BenchmarkOutcome> {
    let spec: BenchmarkSpec = read_json(path)?;
    let mut train_cfg = spec.train;
    apply_seed_override(&mut train_cfg)?;
    let ds = generate(&spec.synth)?;
    let labels = ds
        .labels
        .clone()
        .ok_or_else(|| Error::Domain("generated series carries no labels".into()))?;

    let train_started = Instant::now();
    let (model, _) = train(&ds, &train_cfg)?;
    let train_seconds = train_started.elapsed().as_secs_f64();

    let scores = score_dataset(&model, &ds, train_cfg.batch_size)?;
    let ratio = match spec.threshold_ratio {
        Some(r) => r,
        None => ds.anomaly_ratio().ok_or_else(|| {
            Error::Domain("generated series carries no labels for the threshold ratio".into())
        })?,
    };
    let series = apply_threshold(&scores, ThresholdMode::Quantile { ratio })?;
    let metrics = compute_metrics(&series.decisions, &labels, spec.adjust)?;
    Ok(BenchmarkOutcome { metrics, threshold: series.threshold, threshold_ratio: ratio, train_seconds })
}

// ---- shared plumbing -------------------------------------------------------

/// Overrides the config seed from `DCDET_SEED` when that variable is set.
fn apply_seed_override(cfg: &mut TrainConfig) -> Result<()> {
    match std::env::var("DCDET_SEED") {
        Ok(raw) => {
            let seed = raw.trim().parse::<u64>().map_err(|_| {
                Error::Config(format!("DCDET_SEED must be an unsigned integer, got {raw:?}"))
            })?;
            cfg.seed = seed;
            Ok(())
        }
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(Error::Config(format!("DCDET_SEED is not readable: {e}"))),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}
