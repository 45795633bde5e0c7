//! Dataset ingestion and window preparation.
//!
//! Values are CSV with one row per timestamp and one column per channel
//! (optional single header row, `.` decimal point). Labels are a single
//! 0/1 column aligned with the value rows.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A multivariate series with optional point labels.
#[derive(Debug, Clone)]
pub struct TimeSeriesDataset {
    /// Row-major `num_timestamps x num_channels` values.
    pub values: Vec<f64>,
    pub num_timestamps: usize,
    pub num_channels: usize,
    /// Per-timestamp anomaly labels, when known.
    pub labels: Option<Vec<bool>>,
    pub name: String,
}

impl TimeSeriesDataset {
    pub fn new(
        values: Vec<f64>,
        num_timestamps: usize,
        num_channels: usize,
        labels: Option<Vec<bool>>,
        name: impl Into<String>,
    ) -> Result<TimeSeriesDataset> {
        if num_timestamps == 0 || num_channels == 0 {
            return Err(Error::Ingestion("dataset must have at least one row and one column".into()));
        }
        if values.len() != num_timestamps * num_channels {
            return Err(Error::Ingestion(format!(
                "value buffer length {} does not match {} x {}",
                values.len(),
                num_timestamps,
                num_channels
            )));
        }
        if let Some(l) = &labels {
            if l.len() != num_timestamps {
                return Err(Error::Ingestion(format!(
                    "label length {} does not match {} timestamps",
                    l.len(),
                    num_timestamps
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Ingestion("dataset contains non-finite values".into()));
        }
        Ok(TimeSeriesDataset { values, num_timestamps, num_channels, labels, name: name.into() })
    }

    #[inline]
    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.num_channels + c]
    }

    /// Fraction of labeled-anomalous timestamps, if labels are present.
    pub fn anomaly_ratio(&self) -> Option<f64> {
        self.labels.as_ref().map(|l| {
            l.iter().filter(|&&x| x).count() as f64 / self.num_timestamps as f64
        })
    }
}

/// Sliding-window parameters. The default stride equals the window size
/// (non-overlapping windows), so every covered timestamp is scored exactly
/// once.
#[derive(Debug, Clone, Copy)]
pub struct WindowSpec {
    pub win_size: usize,
    pub stride: usize,
}

impl WindowSpec {
    /// Non-overlapping windows of length `win_size`.
    pub fn non_overlapping(win_size: usize) -> WindowSpec {
        WindowSpec { win_size, stride: win_size }
    }
}

/// A batch of extracted windows, laid out `batch x win_size x channels`.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub windows: Vec<f64>,
    pub batch: usize,
    pub win_size: usize,
    pub channels: usize,
    /// Start timestamp of each window in the source series.
    pub origins: Vec<usize>,
}

impl WindowBatch {
    #[inline]
    pub fn at(&self, b: usize, t: usize, c: usize) -> f64 {
        self.windows[(b * self.win_size + t) * self.channels + c]
    }

    /// A new batch containing the selected windows, in the given order.
    pub fn select(&self, indices: &[usize]) -> WindowBatch {
        let stride = self.win_size * self.channels;
        let mut windows = Vec::with_capacity(indices.len() * stride);
        let mut origins = Vec::with_capacity(indices.len());
        for &i in indices {
            windows.extend_from_slice(&self.windows[i * stride..(i + 1) * stride]);
            origins.push(self.origins[i]);
        }
        WindowBatch {
            windows,
            batch: indices.len(),
            win_size: self.win_size,
            channels: self.channels,
            origins,
        }
    }
}

/// Extracts sliding windows. The window count is
/// `floor((T - W) / stride) + 1`; trailing timestamps that do not fill a
/// window are dropped.
pub fn slide_windows(ds: &TimeSeriesDataset, spec: WindowSpec) -> Result<WindowBatch> {
    if spec.win_size == 0 || spec.stride == 0 {
        return Err(Error::Domain("window size and stride must be >= 1".into()));
    }
    if spec.win_size > ds.num_timestamps {
        return Err(Error::Domain(format!(
            "window size {} exceeds series length {}",
            spec.win_size, ds.num_timestamps
        )));
    }
    let count = (ds.num_timestamps - spec.win_size) / spec.stride + 1;
    let d = ds.num_channels;
    let mut windows = Vec::with_capacity(count * spec.win_size * d);
    let mut origins = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * spec.stride;
        windows.extend_from_slice(&ds.values[start * d..(start + spec.win_size) * d]);
        origins.push(start);
    }
    Ok(WindowBatch { windows, batch: count, win_size: spec.win_size, channels: d, origins })
}

/// Normalizes each window per channel to zero mean and unit variance,
/// dividing by `std + 1e-5` (population standard deviation). Constant
/// channels therefore map to zeros. Not learnable.
pub fn instance_normalize(batch: &WindowBatch) -> WindowBatch {
    let mut out = batch.clone();
    let w = batch.win_size;
    let d = batch.channels;
    for b in 0..batch.batch {
        for c in 0..d {
            let mut mean = 0.0;
            for t in 0..w {
                mean += batch.at(b, t, c);
            }
            mean /= w as f64;
            let mut var = 0.0;
            for t in 0..w {
                let dv = batch.at(b, t, c) - mean;
                var += dv * dv;
            }
            var /= w as f64;
            let denom = var.sqrt() + 1e-5;
            for t in 0..w {
                out.windows[(b * w + t) * d + c] = (batch.at(b, t, c) - mean) / denom;
            }
        }
    }
    out
}

/// Splits a series into a leading train segment and trailing test segment
/// by timestamp fraction. Labels split with the series.
pub fn prefix_split(
    ds: &TimeSeriesDataset,
    train_fraction: f64,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(Error::Domain(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let cut = ((ds.num_timestamps as f64) * train_fraction).floor() as usize;
    if cut == 0 || cut == ds.num_timestamps {
        return Err(Error::Domain(format!(
            "train fraction {train_fraction} leaves an empty split for length {}",
            ds.num_timestamps
        )));
    }
    let d = ds.num_channels;
    let train = TimeSeriesDataset::new(
        ds.values[..cut * d].to_vec(),
        cut,
        d,
        ds.labels.as_ref().map(|l| l[..cut].to_vec()),
        format!("{}-train", ds.name),
    )?;
    let test = TimeSeriesDataset::new(
        ds.values[cut * d..].to_vec(),
        ds.num_timestamps - cut,
        d,
        ds.labels.as_ref().map(|l| l[cut..].to_vec()),
        format!("{}-test", ds.name),
    )?;
    Ok((train, test))
}

/// Loads a values CSV (and optionally an aligned labels CSV). With
/// `has_header`, the first line is skipped. Parse failures name the file,
/// line, and column.
pub fn load_csv(
    path: &Path,
    has_header: bool,
    label_path: Option<&Path>,
) -> Result<TimeSeriesDataset> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        if has_header && lineno == 0 {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Ingestion(format!(
                    "{}:{}: column {} is not a number: {:?}",
                    path.display(),
                    lineno + 1,
                    col + 1,
                    field.trim()
                ))
            })?;
            row.push(v);
        }
        if let Some(w) = width {
            if row.len() != w {
                return Err(Error::Ingestion(format!(
                    "{}:{}: expected {} columns, found {}",
                    path.display(),
                    lineno + 1,
                    w,
                    row.len()
                )));
            }
        } else {
            width = Some(row.len());
        }
        rows.push(row);
    }
    let width = width.ok_or_else(|| {
        Error::Ingestion(format!("{}: no data rows", path.display()))
    })?;
    let values: Vec<f64> = rows.iter().flatten().copied().collect();
    let labels = match label_path {
        Some(lp) => Some(load_label_csv(lp, has_header)?),
        None => None,
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    TimeSeriesDataset::new(values, rows.len(), width, labels, name)
}

/// Loads a single-column 0/1 label CSV.
pub fn load_label_csv(path: &Path, has_header: bool) -> Result<Vec<bool>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if has_header && lineno == 0 {
            continue;
        }
        let field = line.trim();
        if field.is_empty() {
            continue;
        }
        match field {
            "0" => labels.push(false),
            "1" => labels.push(true),
            other => {
                return Err(Error::Ingestion(format!(
                    "{}:{}: label must be 0 or 1, found {:?}",
                    path.display(),
                    lineno + 1,
                    other
                )))
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Ingestion(format!("{}: no labels", path.display())));
    }
    Ok(labels)
}

/// Writes a values CSV (no header), one row per timestamp.
pub fn write_values_csv(path: &Path, ds: &TimeSeriesDataset) -> Result<()> {
    let mut out = String::new();
    for t in 0..ds.num_timestamps {
        for c in 0..ds.num_channels {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", ds.value(t, c)));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes a single-column 0/1 labels CSV (no header).
pub fn write_labels_csv(path: &Path, labels: &[bool]) -> Result<()> {
    let mut out = String::new();
    for &l in labels {
        out.push(if l { '1' } else { '0' });
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
