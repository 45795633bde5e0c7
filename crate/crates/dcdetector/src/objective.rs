//! Discrepancy losses between the two branches, the point-wise anomaly
//! score, and score thresholding.
//!
//! Both branches emit lists of row-stochastic `W x W` maps. Training
//! compares them with per-row KL divergence under per-branch stop-gradients
//! (each branch chases a frozen copy of the other); the anomaly score is
//! the same row-wise symmetric KL read out at eval time, averaged over
//! every (layer, scale, head, channel) cell so its magnitude is
//! architecture-free.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{slide_windows, TimeSeriesDataset, WindowSpec};
use crate::error::{Error, Result};
use crate::model::{DetectorModel, EvalMaps, ForwardMaps};
use crate::tensor::{Tape, TensorId};

/// Floor applied inside every logarithm, in the loss and score paths alike.
pub const KL_CLAMP: f64 = 1e-12;

/// Flavor of the per-row discrepancy used by the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Symmetric KL: `KL(a || b) + KL(b || a)`.
    #[default]
    SymKl,
    /// One direction only: `KL(trained branch || frozen other)`.
    SimpleKl,
    /// Jensen-Shannon divergence (bounded by `ln 2` per row).
    Js,
}

/// Scalar outcome of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// In-patch branch loss (its stop-gradient frozen the patch-wise maps).
    pub loss_p: f64,
    /// Patch-wise branch loss (its stop-gradient froze the in-patch maps).
    pub loss_n: f64,
    /// `(loss_n - loss_p) / K` with `K = layers x scales`.
    pub total: f64,
}

/// Tape nodes behind a [`LossReport`], for backward passes and tests.
#[derive(Debug, Clone, Copy)]
pub struct LossArtifacts {
    pub total: TensorId,
    pub loss_p: TensorId,
    pub loss_n: TensorId,
    pub report: LossReport,
}

/// Per-row `KL(a_row || b_row)` over the last axis with the library-wide
/// clamp; drops the last axis.
pub fn kl_rowwise(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId> {
    tape.row_kl(a, b, KL_CLAMP)
}

/// Mean over rows of the chosen discrepancy between `branch` (the side this
/// term trains) and `other` (possibly a stop-gradient copy).
fn variant_term(
    tape: &mut Tape,
    branch: TensorId,
    other: TensorId,
    variant: LossVariant,
) -> Result<TensorId> {
    match variant {
        LossVariant::SymKl => {
            let fwd = tape.row_kl(branch, other, KL_CLAMP)?;
            let rev = tape.row_kl(other, branch, KL_CLAMP)?;
            let sum = tape.add(fwd, rev)?;
            tape.mean_all(sum)
        }
        LossVariant::SimpleKl => {
            let fwd = tape.row_kl(branch, other, KL_CLAMP)?;
            tape.mean_all(fwd)
        }
        LossVariant::Js => {
            let mix = tape.add(branch, other)?;
            let m = tape.scale(mix, 0.5)?;
            let ka = tape.row_kl(branch, m, KL_CLAMP)?;
            let kb = tape.row_kl(other, m, KL_CLAMP)?;
            let sum = tape.add(ka, kb)?;
            let js = tape.scale(sum, 0.5)?;
            tape.mean_all(js)
        }
    }
}

/// The training objective over one forward pass's map lists.
///
/// Per (layer, scale) cell: `loss_p` accumulates the discrepancy that
/// trains the in-patch branch against a (by default) gradient-stopped
/// patch-wise map, `loss_n` the mirror image; each cell contributes the
/// mean over rows/heads/channels and cells are summed. The returned total
/// is `(loss_n - loss_p) / K`. The stop-gradient flags change gradients
/// only — every forward value is identical across flag settings.
pub fn discrepancy_loss(
    tape: &mut Tape,
    maps: &ForwardMaps,
    stopgrad_patchwise: bool,
    stopgrad_inpatch: bool,
    variant: LossVariant,
) -> Result<LossArtifacts> {
    if maps.maps.is_empty() {
        return Err(Error::Shape("discrepancy_loss on an empty map list".into()));
    }
    let mut loss_p_acc: Option<TensorId> = None;
    let mut loss_n_acc: Option<TensorId> = None;
    for cell in &maps.maps {
        let n_map = cell.patchwise;
        let p_map = cell.inpatch;
        if tape.shape(n_map) != tape.shape(p_map) {
            return Err(Error::Shape(format!(
                "branch maps disagree in shape: {:?} vs {:?}",
                tape.shape(n_map),
                tape.shape(p_map)
            )));
        }
        let n_frozen = if stopgrad_patchwise { tape.stop_gradient(n_map)? } else { n_map };
        let p_frozen = if stopgrad_inpatch { tape.stop_gradient(p_map)? } else { p_map };
        let term_p = variant_term(tape, p_map, n_frozen, variant)?;
        let term_n = variant_term(tape, n_map, p_frozen, variant)?;
        loss_p_acc = Some(match loss_p_acc {
            Some(acc) => tape.add(acc, term_p)?,
            None => term_p,
        });
        loss_n_acc = Some(match loss_n_acc {
            Some(acc) => tape.add(acc, term_n)?,
            None => term_n,
        });
    }
    let loss_p = loss_p_acc.expect("non-empty map list");
    let loss_n = loss_n_acc.expect("non-empty map list");
    let diff = tape.sub(loss_n, loss_p)?;
    let total = tape.scale(diff, 1.0 / maps.maps.len() as f64)?;
    Ok(LossArtifacts {
        total,
        loss_p,
        loss_n,
        report: LossReport {
            loss_p: tape.scalar_value(loss_p),
            loss_n: tape.scalar_value(loss_n),
            total: tape.scalar_value(total),
        },
    })
}

/// Plain-storage `KL(a || b)` for one row, mirroring the tape op exactly.
fn kl_row(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let p = x.max(KL_CLAMP);
        let q = y.max(KL_CLAMP);
        s += p * (p.ln() - q.ln());
    }
    s
}

/// Symmetric per-row KL used by the anomaly score.
pub fn sym_kl_row(a: &[f64], b: &[f64]) -> f64 {
    kl_row(a, b) + kl_row(b, a)
}

/// Point-wise anomaly scores for every window in an eval-mode forward pass.
///
/// Row `i` of each `W x W` map is timestep `i`'s attention distribution;
/// its score contribution is the symmetric KL between the two branches'
/// rows. Returns one length-`W` vector per window (leading-axis blocks of
/// `channels` rows belong to one window), averaging over every
/// (layer, scale) cell, head, and channel.
pub fn anomaly_score(maps: &EvalMaps, channels: usize) -> Result<Vec<Vec<f64>>> {
    if channels == 0 || maps.rows % channels != 0 {
        return Err(Error::Shape(format!(
            "{} map rows do not fold into {channels} channels",
            maps.rows
        )));
    }
    if maps.maps.is_empty() {
        return Err(Error::Shape("anomaly_score on an empty map list".into()));
    }
    let batch = maps.rows / channels;
    let (w, h) = (maps.win, maps.heads);
    let denom = (maps.maps.len() * h * channels) as f64;
    let mut scores = vec![vec![0.0; w]; batch];
    for cell in &maps.maps {
        for r in 0..maps.rows {
            let b = r / channels;
            for hi in 0..h {
                let base = (r * h + hi) * w * w;
                for i in 0..w {
                    let row = base + i * w;
                    let n_row = &cell.patchwise[row..row + w];
                    let p_row = &cell.inpatch[row..row + w];
                    scores[b][i] += sym_kl_row(p_row, n_row) / denom;
                }
            }
        }
    }
    Ok(scores)
}

/// Scores a whole series with non-overlapping windows, forwarded in chunks
/// of at most `batch_size` windows. Trailing timestamps that do not fill a
/// window receive the minimum observed score (they cannot raise an alarm
/// on their own, but stay comparable under any threshold).
pub fn score_dataset(
    model: &DetectorModel,
    ds: &TimeSeriesDataset,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::Domain("batch_size must be >= 1".into()));
    }
    let cfg = model.config();
    if ds.num_channels != cfg.channels {
        return Err(Error::Config(format!(
            "series has {} channels, model expects {}",
            ds.num_channels, cfg.channels
        )));
    }
    let w = cfg.win_size;
    let all = slide_windows(ds, WindowSpec::non_overlapping(w))?;
    let mut scores = vec![0.0; ds.num_timestamps];
    let mut min_seen = f64::INFINITY;
    let mut start = 0;
    while start < all.batch {
        let end = (start + batch_size).min(all.batch);
        let indices: Vec<usize> = (start..end).collect();
        let chunk = all.select(&indices);
        let maps = model.forward_eval(&chunk)?;
        let per_window = anomaly_score(&maps, cfg.channels)?;
        for (slot, window_scores) in indices.iter().zip(per_window) {
            let origin = all.origins[*slot];
            for (i, v) in window_scores.into_iter().enumerate() {
                min_seen = min_seen.min(v);
                scores[origin + i] = v;
            }
        }
        start = end;
    }
    let covered = all.batch * w;
    for s in scores.iter_mut().skip(covered) {
        *s = min_seen;
    }
    Ok(scores)
}

/// How the decision threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Use `delta` directly.
    Absolute { delta: f64 },
    /// Flag the top `ratio` fraction: `delta` is the `(1 - ratio)` quantile
    /// of the scores (order statistic, upper tie kept).
    Quantile { ratio: f64 },
}

/// Scores with their threshold and binary decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub scores: Vec<f64>,
    pub threshold: f64,
    /// `decisions[i] == true` exactly when `scores[i] >= threshold`.
    pub decisions: Vec<bool>,
}

/// Thresholds a score series. Quantile mode picks `delta` so that
/// `round(ratio * n)` scores land at or above it; when that count rounds to
/// zero the threshold is `+inf` and nothing is flagged.
pub fn apply_threshold(scores: &[f64], mode: ThresholdMode) -> Result<ScoreSeries> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("score series contains non-finite values".into()));
    }
    let threshold = match mode {
        ThresholdMode::Absolute { delta } => {
            if delta.is_nan() {
                return Err(Error::Domain("absolute threshold must not be NaN".into()));
            }
            delta
        }
        ThresholdMode::Quantile { ratio } => {
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(Error::Domain(format!(
                    "quantile ratio {ratio} outside (0, 1)"
                )));
            }
            if scores.is_empty() {
                return Err(Error::Domain("cannot take a quantile of no scores".into()));
            }
            let mut sorted = scores.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
            let n = sorted.len();
            let k = ((ratio * n as f64).round() as usize).min(n);
            if k == 0 {
                f64::INFINITY
            } else {
                sorted[n - k]
            }
        }
    };
    let decisions = scores.iter().map(|s| *s >= threshold).collect();
    Ok(ScoreSeries { scores: scores.to_vec(), threshold, decisions })
}

/// Writes `timestamp,score,decision` rows (decision as 0/1). Scores print
/// in shortest round-trip form, so reading the file back is lossless.
pub fn write_scores_csv(path: &Path, series: &ScoreSeries) -> Result<()> {
    let mut out = String::from("timestamp,score,decision\n");
    for (t, (s, d)) in series.scores.iter().zip(&series.decisions).enumerate() {
        writeln!(out, "{t},{s},{}", u8::from(*d)).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a score CSV back as `(scores, decisions)`.
pub fn read_scores_csv(path: &Path) -> Result<(Vec<f64>, Vec<bool>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("timestamp,score,decision") => {}
        other => {
            return Err(Error::Ingestion(format!(
                "{}: expected score CSV header, got {other:?}",
                path.display()
            )))
        }
    }
    let mut scores = Vec::new();
    let mut decisions = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (t, s, d) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(t), Some(s), Some(d), None) => (t, s, d),
            _ => {
                return Err(Error::Ingestion(format!(
                    "{}:{}: expected 3 fields",
                    path.display(),
                    i + 2
                )))
            }
        };
        let _: usize = t.parse().map_err(|_| {
            Error::Ingestion(format!("{}:{}: bad timestamp {t:?}", path.display(), i + 2))
        })?;
        let score: f64 = s.parse().map_err(|_| {
            Error::Ingestion(format!("{}:{}: bad score {s:?}", path.display(), i + 2))
        })?;
        let decision = match d {
            "0" => false,
            "1" => true,
            _ => {
                return Err(Error::Ingestion(format!(
                    "{}:{}: decision must be 0 or 1, got {d:?}",
                    path.display(),
                    i + 2
                )))
            }
        };
        scores.push(score);
        decisions.push(decision);
    }
    Ok((scores, decisions))
}
