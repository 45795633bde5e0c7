//! Dual-attention anomaly detection for multivariate time series.
//!
//! The detector slices each window into patches at several scales and runs
//! two self-attention branches per encoder layer over the same tokens: a
//! *patch-wise* branch (tokens are whole patches) and an *in-patch* branch
//! (tokens are within-patch positions), sharing one set of `W_Q`/`W_K`
//! projections. The softmax attention maps themselves are the learned
//! representations; both are up-sampled to `W x W` row distributions and
//! trained to agree through per-row KL divergence under per-branch
//! stop-gradients. At inference the same row-wise discrepancy becomes a
//! point-wise anomaly score: nominal timesteps are seen consistently by
//! both views, anomalous ones are not.
//!
//! The crate is self-contained: a tape-based reverse-mode autodiff core
//! ([`tensor`]), Adam ([`adam`]), CSV ingestion and windowing ([`data`]),
//! a labeled synthetic-series generator ([`synth`]), the network
//! ([`model`]), losses/scores/thresholds ([`objective`]), the training
//! loop with benchmark presets ([`trainer`]), point-adjusted evaluation
//! ([`metrics`]), and a named-tensor checkpoint format ([`checkpoint`]).
//! All floating-point work is `f64`; learnable parameters are kept on the
//! `f32` grid so checkpoints round-trip bit-exactly.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use adam::AdamState;
pub use data::{
    instance_normalize, load_csv, load_label_csv, prefix_split, slide_windows, write_labels_csv,
    write_values_csv, TimeSeriesDataset, WindowBatch, WindowSpec,
};
pub use error::{Error, Result};
pub use metrics::{compute_metrics, point_adjust, MetricsReport};
pub use model::{
    parameter_layout, patchify, sinusoidal_pe, upsample_inpatch, upsample_patchwise,
    DetectorConfig, DetectorModel, EvalLayerScaleMaps, EvalMaps, ForwardMaps, LayerScaleMaps,
};
pub use objective::{
    anomaly_score, apply_threshold, discrepancy_loss, kl_rowwise, read_scores_csv, score_dataset,
    sym_kl_row, write_scores_csv, LossArtifacts, LossReport, LossVariant, ScoreSeries,
    ThresholdMode,
};
pub use rng::{RngPurpose, RunSeed};
pub use synth::{generate, AnomalyInjection, AnomalyKind, SynthSpec};
pub use tensor::{Tape, Tensor, TensorId};
pub use trainer::{
    checkpoint_load, checkpoint_save, collapse_witness, preset, train, Preset, RunLog,
    StepRecord, TrainConfig, PRESETS,
};
