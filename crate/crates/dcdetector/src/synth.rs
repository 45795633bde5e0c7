//! Synthetic series generation with labeled anomaly injections.
//!
//! The base signal is a sum of sinusoids (frequencies in cycles per 100
//! steps, one random phase per channel per frequency) plus Gaussian noise.
//! Injections mutate a copy of the base signal and set the label vector;
//! all spans are non-overlapping, so removing an injection restores the
//! base signal on its span bit-for-bit.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};

/// The five injected anomaly behaviors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// One point far outside the global distribution.
    GlobalPoint,
    /// One point far outside its local (+-10 steps) context.
    ContextualPoint,
    /// A span whose base frequencies are scaled by `magnitude`.
    Seasonal,
    /// A span flattened to its own mean (pattern break).
    Group,
    /// A linear ramp added across a span.
    Trend,
}

impl AnomalyKind {
    /// Point anomalies occupy exactly one timestamp.
    pub fn is_point(self) -> bool {
        matches!(self, AnomalyKind::GlobalPoint | AnomalyKind::ContextualPoint)
    }
}

/// One labeled injection. `channel` selects the mutated channel
/// (labels are shared across channels).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyInjection {
    pub kind: AnomalyKind,
    pub start: usize,
    pub length: usize,
    pub magnitude: f64,
    #[serde(default)]
    pub channel: usize,
}

/// Generator parameters; serialized verbatim into the sidecar file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub length: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Sinusoid frequencies in cycles per 100 steps, each with unit
    /// amplitude.
    pub base_freqs: Vec<f64>,
    #[serde(default)]
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub injections: Vec<AnomalyInjection>,
}

fn default_channels() -> usize {
    1
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("series length must be >= 1".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channel count must be >= 1".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise sigma {} must be finite and non-negative",
                self.noise_sigma
            )));
        }
        if self.base_freqs.iter().any(|f| !f.is_finite()) {
            return Err(Error::Config("base frequencies must be finite".into()));
        }
        let mut spans: Vec<(usize, usize)> = Vec::new();
        for (i, inj) in self.injections.iter().enumerate() {
            if inj.channel >= self.channels {
                return Err(Error::Config(format!(
                    "injection {i}: channel {} out of range for {} channels",
                    inj.channel, self.channels
                )));
            }
            if !inj.magnitude.is_finite() {
                return Err(Error::Config(format!("injection {i}: magnitude must be finite")));
            }
            if inj.length == 0 {
                return Err(Error::Config(format!("injection {i}: length must be >= 1")));
            }
            if inj.kind.is_point() && inj.length != 1 {
                return Err(Error::Config(format!(
                    "injection {i}: point anomalies must have length 1, got {}",
                    inj.length
                )));
            }
            if !inj.kind.is_point() && inj.length < 2 {
                return Err(Error::Config(format!(
                    "injection {i}: pattern anomalies need length >= 2"
                )));
            }
            let end = inj.start.checked_add(inj.length).ok_or_else(|| {
                Error::Config(format!("injection {i}: span overflows"))
            })?;
            if end > self.length {
                return Err(Error::Config(format!(
                    "injection {i}: span [{}, {end}) exceeds series length {}",
                    inj.start, self.length
                )));
            }
            spans.push((inj.start, end));
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::Config(format!(
                    "injections overlap: [{}, {}) and [{}, {})",
                    pair[0].0, pair[0].1, pair[1].0, pair[1].1
                )));
            }
        }
        Ok(())
    }
}

/// Base signal pieces kept separate so injections can re-synthesize spans.
struct BaseSignal {
    /// Sinusoid-plus-noise values, row-major `length x channels`.
    values: Vec<f64>,
    /// The additive noise component alone (same layout).
    noise: Vec<f64>,
    /// `phases[channel][freq_index]`.
    phases: Vec<Vec<f64>>,
}

fn synth_point(freqs: &[f64], phases: &[f64], t: usize, freq_scale: f64) -> f64 {
    let mut v = 0.0;
    for (f, phi) in freqs.iter().zip(phases) {
        v += (2.0 * std::f64::consts::PI * f * freq_scale * (t as f64) / 100.0 + phi).sin();
    }
    v
}

fn base_signal(spec: &SynthSpec) -> BaseSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phases: Vec<Vec<f64>> = (0..spec.channels)
        .map(|_| {
            (0..spec.base_freqs.len())
                .map(|_| rng.gen_range(0.0..2.0 * std::f64::consts::PI))
                .collect()
        })
        .collect();
    let n = spec.length * spec.channels;
    let mut noise = vec![0.0; n];
    for z in &mut noise {
        let sample: f64 = StandardNormal.sample(&mut rng);
        *z = spec.noise_sigma * sample;
    }
    let mut values = vec![0.0; n];
    for t in 0..spec.length {
        for c in 0..spec.channels {
            let idx = t * spec.channels + c;
            values[idx] = synth_point(&spec.base_freqs, &phases[c], t, 1.0) + noise[idx];
        }
    }
    BaseSignal { values, noise, phases }
}

fn channel_stats(base: &BaseSignal, length: usize, channels: usize, c: usize) -> (f64, f64) {
    let mut mean = 0.0;
    for t in 0..length {
        mean += base.values[t * channels + c];
    }
    mean /= length as f64;
    let mut var = 0.0;
    for t in 0..length {
        let d = base.values[t * channels + c] - mean;
        var += d * d;
    }
    var /= length as f64;
    (mean, var.sqrt())
}

/// Generates the series described by `spec`, with labels marking every
/// injected span. Base statistics used by the mutators are always computed
/// on the pre-injection signal, so injection order never matters.
pub fn generate(spec: &SynthSpec) -> Result<TimeSeriesDataset> {
    spec.validate()?;
    let base = base_signal(spec);
    let d = spec.channels;
    let mut values = base.values.clone();
    let mut labels = vec![false; spec.length];
    for inj in &spec.injections {
        apply_injection(spec, &base, inj, &mut values)?;
        for l in &mut labels[inj.start..inj.start + inj.length] {
            *l = true;
        }
    }
    TimeSeriesDataset::new(values, spec.length, d, Some(labels), format!("synth-{}", spec.seed))
}

fn apply_injection(
    spec: &SynthSpec,
    base: &BaseSignal,
    inj: &AnomalyInjection,
    values: &mut [f64],
) -> Result<()> {
    let d = spec.channels;
    let c = inj.channel;
    match inj.kind {
        AnomalyKind::GlobalPoint => {
            let (mean, std) = channel_stats(base, spec.length, d, c);
            values[inj.start * d + c] = mean + inj.magnitude * std;
        }
        AnomalyKind::ContextualPoint => {
            let lo = inj.start.saturating_sub(10);
            let hi = (inj.start + 11).min(spec.length);
            let n = (hi - lo) as f64;
            let mut mean = 0.0;
            for t in lo..hi {
                mean += base.values[t * d + c];
            }
            mean /= n;
            let mut var = 0.0;
            for t in lo..hi {
                let dv = base.values[t * d + c] - mean;
                var += dv * dv;
            }
            var /= n;
            values[inj.start * d + c] = mean + inj.magnitude * var.sqrt();
        }
        AnomalyKind::Seasonal => {
            for t in inj.start..inj.start + inj.length {
                let idx = t * d + c;
                values[idx] =
                    synth_point(&spec.base_freqs, &base.phases[c], t, inj.magnitude)
                        + base.noise[idx];
            }
        }
        AnomalyKind::Group => {
            let mut level = 0.0;
            for t in inj.start..inj.start + inj.length {
                level += base.values[t * d + c];
            }
            level /= inj.length as f64;
            for t in inj.start..inj.start + inj.length {
                values[t * d + c] = level;
            }
        }
        AnomalyKind::Trend => {
            let (_, std) = channel_stats(base, spec.length, d, c);
            let denom = (inj.length - 1).max(1) as f64;
            for (i, t) in (inj.start..inj.start + inj.length).enumerate() {
                values[t * d + c] += inj.magnitude * std * (i as f64) / denom;
            }
        }
    }
    if values[inj.start * d..(inj.start + inj.length) * d].iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "injection at {} produced non-finite values",
            inj.start
        )));
    }
    Ok(())
}
