//! The training loop, benchmark presets, checkpoint plumbing, and run logs.
//!
//! Training slides non-overlapping windows over the series, shuffles their
//! order each epoch with the run seed's shuffle stream, and runs Adam on
//! the branch-discrepancy objective. The final short batch of an epoch is
//! kept, not dropped. Everything is deterministic given the seed; any
//! non-finite value aborts with a diagnostic naming the epoch and step.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::checkpoint;
use crate::data::{slide_windows, TimeSeriesDataset, WindowBatch, WindowSpec};
use crate::error::{Error, Result};
use crate::model::{parameter_layout, DetectorConfig, DetectorModel};
use crate::objective::discrepancy_loss;
use crate::rng::{RngPurpose, RunSeed};
use crate::tensor::{Tape, Tensor};

fn default_lr() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    128
}
fn default_epochs() -> usize {
    3
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Run seed; feeds the init, dropout, and shuffle streams.
    #[serde(default)]
    pub seed: u64,
    /// Cap on the global L2 gradient norm; off by default.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Benchmark preset name; when set, [`TrainConfig::apply_preset`]
    /// overwrites the detector's window and patch sizes.
    #[serde(default)]
    pub preset: Option<String>,
    pub detector: DetectorConfig,
}

impl TrainConfig {
    /// Library defaults around the given architecture.
    pub fn new(detector: DetectorConfig) -> TrainConfig {
        TrainConfig {
            lr: default_lr(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: 0,
            grad_clip: None,
            preset: None,
            detector,
        }
    }

    /// Overwrites window/patch geometry from the named preset, if any.
    pub fn apply_preset(&mut self) -> Result<()> {
        if let Some(name) = &self.preset {
            let p = preset(name).ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset {name:?} (expected one of {})",
                    preset_names().join(", ")
                ))
            })?;
            self.detector.win_size = p.win_size;
            self.detector.patch_sizes = p.patch_sizes.to_vec();
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        if let Some(name) = &self.preset {
            if preset(name).is_none() {
                return Err(Error::Config(format!("unknown preset {name:?}")));
            }
        }
        self.detector.validate()
    }
}

/// Window/patch geometry and labeled anomaly ratio for a published
/// benchmark dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub win_size: usize,
    pub patch_sizes: &'static [usize],
    /// Fraction of anomalous timestamps; the default quantile ratio.
    pub anomaly_ratio: f64,
}

/// Benchmark presets, keyed by dataset name.
pub const PRESETS: &[Preset] = &[
    Preset { name: "MSL", win_size: 90, patch_sizes: &[3, 5], anomaly_ratio: 0.105 },
    Preset { name: "SMAP", win_size: 105, patch_sizes: &[3, 5, 7], anomaly_ratio: 0.128 },
    Preset { name: "PSM", win_size: 60, patch_sizes: &[1, 3, 5], anomaly_ratio: 0.278 },
    Preset { name: "SMD", win_size: 105, patch_sizes: &[5, 7], anomaly_ratio: 0.042 },
    Preset { name: "SWaT", win_size: 105, patch_sizes: &[3, 5, 7], anomaly_ratio: 0.121 },
    Preset { name: "NIPS-TS-SWAN", win_size: 36, patch_sizes: &[1, 3], anomaly_ratio: 0.326 },
    Preset { name: "NIPS-TS-GECCO", win_size: 90, patch_sizes: &[1, 3, 5], anomaly_ratio: 0.011 },
    Preset { name: "UCR", win_size: 105, patch_sizes: &[3, 5, 7], anomaly_ratio: 0.006 },
];

/// Case-insensitive preset lookup.
pub fn preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name.eq_ignore_ascii_case(name))
}

fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.name).collect()
}

/// One optimizer step's scalar outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_p: f64,
    pub loss_n: f64,
    pub total: f64,
}

/// Per-step losses plus per-epoch wall-clock times.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epoch_seconds: Vec<f64>,
}

impl RunLog {
    /// Writes one row per step: `epoch,step,loss_p,loss_n,total,
    /// epoch_seconds`, the last column repeating its epoch's wall time.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,step,loss_p,loss_n,total,epoch_seconds\n");
        for s in &self.steps {
            let secs = self
                .epoch_seconds
                .get(s.epoch)
                .map(|v| v.to_string())
                .unwrap_or_default();
            writeln!(out, "{},{},{},{},{},{secs}", s.epoch, s.step, s.loss_p, s.loss_n, s.total)
                .expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Prefixes numeric failures with the training position that hit them.
fn at_step(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => {
            Error::Numeric(format!("epoch {epoch} step {step}: {msg}"))
        }
        other => other,
    }
}

/// Trains a fresh model on `dataset` (labels, if any, are ignored).
///
/// Runs `epochs x ceil(n_windows / batch_size)` Adam steps over
/// non-overlapping windows, reshuffled each epoch; the last short batch is
/// kept. Returns the trained model and its run log.
pub fn train(dataset: &TimeSeriesDataset, config: &TrainConfig) -> Result<(DetectorModel, RunLog)> {
    let mut config = config.clone();
    config.apply_preset()?;
    config.validate()?;
    if dataset.num_channels != config.detector.channels {
        return Err(Error::Config(format!(
            "dataset has {} channels, config expects {}",
            dataset.num_channels, config.detector.channels
        )));
    }
    let seed = RunSeed(config.seed);
    let mut model = DetectorModel::new(config.detector.clone(), seed)?;
    let windows = slide_windows(dataset, WindowSpec::non_overlapping(config.detector.win_size))?;
    let mut adam = AdamState::new(config.lr, &model.param_sizes())?;
    let mut shuffle_rng = seed.rng(RngPurpose::Shuffle);
    let mut dropout_rng = seed.rng(RngPurpose::Dropout);
    let mut log = RunLog::default();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..windows.batch).collect();
        order.shuffle(&mut shuffle_rng);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = windows.select(chunk);
            let mut tape = Tape::new();
            let ids = model.stage(&mut tape, true).map_err(|e| at_step(e, epoch, step))?;
            let fw = model
                .forward_on_tape(&mut tape, &ids, &batch, true, Some(&mut dropout_rng))
                .map_err(|e| at_step(e, epoch, step))?;
            let arts = discrepancy_loss(
                &mut tape,
                &fw,
                config.detector.stopgrad_patchwise,
                config.detector.stopgrad_inpatch,
                config.detector.loss_variant,
            )
            .map_err(|e| at_step(e, epoch, step))?;
            let r = arts.report;
            if !(r.loss_p.is_finite() && r.loss_n.is_finite() && r.total.is_finite()) {
                return Err(Error::Numeric(format!(
                    "epoch {epoch} step {step}: loss is not finite \
                     (loss_p {}, loss_n {}, total {})",
                    r.loss_p, r.loss_n, r.total
                )));
            }
            tape.backward(arts.total).map_err(|e| at_step(e, epoch, step))?;
            let sizes = model.param_sizes();
            let grads: Vec<Vec<f64>> = ids
                .iter()
                .zip(&sizes)
                .map(|(id, n)| tape.grad(*id).map(<[f64]>::to_vec).unwrap_or(vec![0.0; *n]))
                .collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            drop(tape);
            let mut params = model.params_mut();
            adam.step(&mut params, &grad_refs, config.grad_clip)
                .map_err(|e| at_step(e, epoch, step))?;
            if model.params().iter().any(|p| p.data.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric(format!(
                    "epoch {epoch} step {step}: parameters diverged (non-finite after update)"
                )));
            }
            log.steps.push(StepRecord {
                epoch,
                step,
                loss_p: r.loss_p,
                loss_n: r.loss_n,
                total: r.total,
            });
        }
        log.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok((model, log))
}

/// Serializes the model (config + all parameters) to `path` and
/// `path + ".bin"`.
pub fn checkpoint_save(model: &DetectorModel, path: &Path) -> Result<()> {
    let config = serde_json::to_value(model.config())?;
    checkpoint::save_named(path, config, &model.named_params())
}

/// Loads a checkpoint written by [`checkpoint_save`], verifying that the
/// stored tensors match the architecture its config claims.
pub fn checkpoint_load(path: &Path) -> Result<DetectorModel> {
    let (config_json, tensors) = checkpoint::load_named(path)?;
    let config: DetectorConfig = serde_json::from_value(config_json)
        .map_err(|e| Error::Corrupt(format!("checkpoint config does not parse: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Corrupt(format!("checkpoint config is invalid: {e}")))?;
    let layout = parameter_layout(&config);
    if tensors.len() != layout.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint stores {} tensors but the config implies {}",
            tensors.len(),
            layout.len()
        )));
    }
    let mut params = Vec::with_capacity(layout.len());
    for ((name, shape), loaded) in layout.into_iter().zip(tensors) {
        if loaded.name != name || loaded.shape != shape {
            return Err(Error::Corrupt(format!(
                "checkpoint tensor {:?} with shape {:?} does not match \
                 expected {name:?} with shape {shape:?}",
                loaded.name, loaded.shape
            )));
        }
        params.push(Tensor::param(loaded.data, loaded.shape)?);
    }
    DetectorModel::with_params(config, params)
        .map_err(|e| Error::Corrupt(format!("checkpoint parameters rejected: {e}")))
}

/// Mean total-variation distance between distinct rows of the patch-wise
/// branch's maps on `batch`. Values near zero witness representation
/// collapse (every timestep attending identically); healthy models stay
/// clearly above it.
pub fn collapse_witness(model: &DetectorModel, batch: &WindowBatch) -> Result<f64> {
    let maps = model.forward_eval(batch)?;
    let w = maps.win;
    let mut acc = 0.0;
    let mut pairs = 0u64;
    for cell in &maps.maps {
        for mat in cell.patchwise.chunks(w * w) {
            for i in 0..w {
                for j in (i + 1)..w {
                    let ri = &mat[i * w..(i + 1) * w];
                    let rj = &mat[j * w..(j + 1) * w];
                    let tv: f64 = ri.iter().zip(rj).map(|(a, b)| (a - b).abs()).sum();
                    acc += 0.5 * tv;
                    pairs += 1;
                }
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Shape("collapse witness needs windows longer than one step".into()));
    }
    Ok(acc / pairs as f64)
}
