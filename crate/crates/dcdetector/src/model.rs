//! The dual-attention detector network.
//!
//! A window of a multivariate series is split channel-independently into
//! patches at one or more scales. For each scale two token sequences are
//! built: the *size view* (tokens = whole patches, giving the patch-wise
//! branch) and the *num view* (tokens = within-patch positions, giving the
//! in-patch branch). Each encoder layer projects both branches' tokens with
//! the **same** `W_Q`/`W_K` matrices and keeps the softmax attention maps
//! themselves as the representations — there is no value projection, no
//! output projection, and no feed-forward sublayer. Maps from both branches
//! are up-sampled to `W x W` and renormalized so every row is a
//! distribution over the window's timesteps.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{instance_normalize, WindowBatch};
use crate::error::{Error, Result};
use crate::objective::LossVariant;
use crate::rng::{RngPurpose, RunSeed};
use crate::tensor::{round_to_f32, Tape, Tensor, TensorId};

/// Epsilon inside the layer-norm variance square root.
const LN_EPS: f64 = 1e-5;

fn default_d_model() -> usize {
    256
}
fn default_n_heads() -> usize {
    1
}
fn default_n_layers() -> usize {
    3
}
fn default_dropout() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}

/// Architecture and objective switches for [`DetectorModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Window length `W`.
    pub win_size: usize,
    /// Patch sizes; every entry must divide `win_size`.
    pub patch_sizes: Vec<usize>,
    /// Embedding width.
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    /// Attention heads `H`; must divide `d_model`.
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    /// Encoder layers `L`.
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    /// Input channels `d`.
    pub channels: usize,
    /// Dropout probability on embeddings and attention maps (training only).
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Apply stop-gradient to the patch-wise branch inside `loss_P`.
    #[serde(default = "default_true")]
    pub stopgrad_patchwise: bool,
    /// Apply stop-gradient to the in-patch branch inside `loss_N`.
    #[serde(default = "default_true")]
    pub stopgrad_inpatch: bool,
    /// Discrepancy flavor used by the training objective.
    #[serde(default)]
    pub loss_variant: LossVariant,
    /// Per-window, per-channel normalization before patching.
    #[serde(default = "default_true")]
    pub instance_norm: bool,
}

impl DetectorConfig {
    /// A config with library defaults for everything beyond the required
    /// window/patch/channel triple.
    pub fn new(win_size: usize, patch_sizes: Vec<usize>, channels: usize) -> DetectorConfig {
        DetectorConfig {
            win_size,
            patch_sizes,
            d_model: default_d_model(),
            n_heads: default_n_heads(),
            n_layers: default_n_layers(),
            channels,
            dropout: default_dropout(),
            stopgrad_patchwise: true,
            stopgrad_inpatch: true,
            loss_variant: LossVariant::default(),
            instance_norm: true,
        }
    }

    /// Width of one attention head.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Checks every structural invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.win_size == 0 {
            return Err(Error::Config("win_size must be >= 1".into()));
        }
        if self.patch_sizes.is_empty() {
            return Err(Error::Config("patch_sizes must not be empty".into()));
        }
        for &p in &self.patch_sizes {
            if p == 0 {
                return Err(Error::Config("patch_sizes entries must be >= 1".into()));
            }
            if self.win_size % p != 0 {
                return Err(Error::Config(format!(
                    "patch size {p} does not divide win_size {}",
                    self.win_size
                )));
            }
        }
        if self.d_model == 0 {
            return Err(Error::Config("d_model must be >= 1".into()));
        }
        if self.n_heads == 0 {
            return Err(Error::Config("n_heads must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Splits a window batch into the two complementary token views for patch
/// size `p`, folding channels into the batch axis (row `b * d + c` holds
/// batch item `b`, channel `c`).
///
/// * size view, `(B*d) x N x p`: token `n` is the contiguous run
///   `x[n*p .. (n+1)*p]` — one whole patch.
/// * num view, `(B*d) x p x N`: token `i` collects position `i` of every
///   patch, i.e. the strided slice `x[i], x[p+i], x[2p+i], ...`.
pub fn patchify(batch: &WindowBatch, p: usize) -> Result<(Tensor, Tensor)> {
    let w = batch.win_size;
    if p == 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "patch size {p} does not divide window length {w}"
        )));
    }
    let n = w / p;
    let rows = batch.batch * batch.channels;
    let mut size_view = vec![0.0; rows * n * p];
    let mut num_view = vec![0.0; rows * p * n];
    for b in 0..batch.batch {
        for c in 0..batch.channels {
            let r = b * batch.channels + c;
            for ni in 0..n {
                for pi in 0..p {
                    let v = batch.at(b, ni * p + pi, c);
                    size_view[(r * n + ni) * p + pi] = v;
                    num_view[(r * p + pi) * n + ni] = v;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(size_view, vec![rows, n, p])?,
        Tensor::from_vec(num_view, vec![rows, p, n])?,
    ))
}

/// The fixed sinusoidal positional table, row-major `n_tokens x d_model`:
/// `pe[pos, 2k] = sin(pos / 10000^(2k / d_model))` and
/// `pe[pos, 2k + 1] = cos(...)`.
pub fn sinusoidal_pe(n_tokens: usize, d_model: usize) -> Vec<f64> {
    let mut pe = vec![0.0; n_tokens * d_model];
    for pos in 0..n_tokens {
        let mut k = 0;
        while 2 * k < d_model {
            let rate = (pos as f64) / 10000f64.powf(2.0 * k as f64 / d_model as f64);
            pe[pos * d_model + 2 * k] = rate.sin();
            if 2 * k + 1 < d_model {
                pe[pos * d_model + 2 * k + 1] = rate.cos();
            }
            k += 1;
        }
    }
    pe
}

/// Up-samples a patch-wise attention map `.. x N x N` to `.. x W x W` by
/// repeat-interleaving both trailing axes by `p` (patch -> its `p` points)
/// and dividing by `p` so rows stay distributions.
pub fn upsample_patchwise(tape: &mut Tape, attn: TensorId, p: usize) -> Result<TensorId> {
    let nd = tape.shape(attn).len();
    if nd < 2 {
        return Err(Error::Shape("upsample_patchwise needs a matrix input".into()));
    }
    let a = tape.repeat_interleave(attn, nd - 1, p)?;
    let b = tape.repeat_interleave(a, nd - 2, p)?;
    tape.scale(b, 1.0 / p as f64)
}

/// Up-samples an in-patch attention map `.. x p x p` to `.. x W x W` by
/// tiling both trailing axes `reps = W/p` times (one patch -> all patches)
/// and dividing by `reps` so rows stay distributions.
pub fn upsample_inpatch(tape: &mut Tape, attn: TensorId, reps: usize) -> Result<TensorId> {
    let nd = tape.shape(attn).len();
    if nd < 2 {
        return Err(Error::Shape("upsample_inpatch needs a matrix input".into()));
    }
    let a = tape.tile(attn, nd - 1, reps)?;
    let b = tape.tile(a, nd - 2, reps)?;
    tape.scale(b, 1.0 / reps as f64)
}

/// The pair of up-sampled attention maps emitted by one (layer, scale)
/// cell, each shaped `(B*d) x H x W x W` on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerScaleMaps {
    pub layer: usize,
    pub scale_index: usize,
    pub patch_size: usize,
    /// Patch-wise branch map (token axis ran over patches).
    pub patchwise: TensorId,
    /// In-patch branch map (token axis ran over positions).
    pub inpatch: TensorId,
}

/// All `L x |patch_sizes|` map pairs from one forward pass, still on the
/// tape (differentiable).
#[derive(Debug, Clone)]
pub struct ForwardMaps {
    pub maps: Vec<LayerScaleMaps>,
    /// Leading axis extent `B * d`.
    pub rows: usize,
    pub heads: usize,
    pub win: usize,
}

/// One (layer, scale) map pair extracted to plain storage (eval mode).
#[derive(Debug, Clone)]
pub struct EvalLayerScaleMaps {
    pub layer: usize,
    pub scale_index: usize,
    pub patch_size: usize,
    /// Flat `rows x heads x win x win`.
    pub patchwise: Vec<f64>,
    pub inpatch: Vec<f64>,
}

/// All map pairs from an eval-mode forward pass.
#[derive(Debug, Clone)]
pub struct EvalMaps {
    pub maps: Vec<EvalLayerScaleMaps>,
    pub rows: usize,
    pub heads: usize,
    pub win: usize,
}

/// The detector network: per-scale token embeddings plus `L` encoder layers
/// of shared-QK dual attention. Parameters are kept on the `f32` grid (see
/// [`round_to_f32`]) so checkpoints round-trip bit-exactly.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    config: DetectorConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
}

/// Parameter names and shapes implied by a config, in storage order:
/// for each scale `s` the two token embeddings (weight then bias), then for
/// each layer `l` the per-head shared `wq`/`wk` pairs followed by the
/// layer-norm affine pair.
pub fn parameter_layout(config: &DetectorConfig) -> Vec<(String, Vec<usize>)> {
    let dm = config.d_model;
    let dh = config.head_dim();
    let mut layout = Vec::new();
    for (s, &p) in config.patch_sizes.iter().enumerate() {
        let n = config.win_size / p;
        layout.push((format!("scales.{s}.embed_patchwise.weight"), vec![p, dm]));
        layout.push((format!("scales.{s}.embed_patchwise.bias"), vec![dm]));
        layout.push((format!("scales.{s}.embed_inpatch.weight"), vec![n, dm]));
        layout.push((format!("scales.{s}.embed_inpatch.bias"), vec![dm]));
    }
    for l in 0..config.n_layers {
        for h in 0..config.n_heads {
            layout.push((format!("layers.{l}.attn.{h}.wq"), vec![dh, dh]));
            layout.push((format!("layers.{l}.attn.{h}.wk"), vec![dh, dh]));
        }
        layout.push((format!("layers.{l}.norm.gamma"), vec![dm]));
        layout.push((format!("layers.{l}.norm.beta"), vec![dm]));
    }
    layout
}

impl DetectorModel {
    /// Initializes a model: weights uniform in `+-1/sqrt(fan_in)` (fan-in =
    /// token width for embeddings, head width for projections), biases and
    /// `beta` zero, `gamma` one — all rounded to the `f32` grid. Draws come
    /// from the seed's dedicated init stream.
    pub fn new(config: DetectorConfig, seed: RunSeed) -> Result<DetectorModel> {
        config.validate()?;
        let mut rng = seed.rng(RngPurpose::Init);
        let mut params = Vec::new();
        let mut names = Vec::new();
        for (name, shape) in parameter_layout(&config) {
            let tensor = if name.ends_with(".bias") || name.ends_with(".beta") {
                Tensor::param(vec![0.0; crate::tensor::numel(&shape)], shape)?
            } else if name.ends_with(".gamma") {
                Tensor::param(vec![1.0; crate::tensor::numel(&shape)], shape)?
            } else {
                let fan_in = shape[0];
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data: Vec<f64> = (0..crate::tensor::numel(&shape))
                    .map(|_| round_to_f32((rng.gen::<f64>() * 2.0 - 1.0) * bound))
                    .collect();
                Tensor::param(data, shape)?
            };
            params.push(tensor);
            names.push(name);
        }
        Ok(DetectorModel { config, params, names })
    }

    /// Rebuilds a model from externally supplied parameters (checkpoint
    /// loading); shapes must match the layout implied by `config`.
    pub fn with_params(config: DetectorConfig, params: Vec<Tensor>) -> Result<DetectorModel> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if params.len() != layout.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        let mut names = Vec::with_capacity(layout.len());
        for ((name, shape), tensor) in layout.into_iter().zip(&params) {
            if tensor.shape != shape {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    tensor.shape
                )));
            }
            names.push(name);
        }
        let mut params = params;
        for p in &mut params {
            p.requires_grad = true;
        }
        Ok(DetectorModel { config, params, names })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable views of every parameter, in storage order (optimizer hook).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }

    /// `(name, tensor)` pairs in storage order (checkpoint hook).
    pub fn named_params(&self) -> Vec<(&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params).map(|(n, t)| (n, t)).collect()
    }

    /// Element counts per parameter, in storage order (optimizer hook).
    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(Tensor::numel).collect()
    }

    /// Puts every parameter on `tape`, in storage order: as watched
    /// (gradient-tracked) leaves when `trainable`, else as constants.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<TensorId>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.watch(p)
                } else {
                    tape.constant(p.data.clone(), p.shape.clone())
                }
            })
            .collect()
    }

    fn scale_base(&self, s: usize) -> usize {
        s * 4
    }

    fn layer_base(&self, l: usize) -> usize {
        self.config.patch_sizes.len() * 4 + l * (2 * self.config.n_heads + 2)
    }

    /// Storage index of a named parameter, if present.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Affine projection + positional table + dropout for one token view.
    fn embed(
        &self,
        tape: &mut Tape,
        tokens: TensorId,
        weight: TensorId,
        bias: TensorId,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        let n_tokens = tape.shape(tokens)[1];
        let width = tape.shape(tokens)[2];
        if tape.shape(weight)[0] != width {
            return Err(Error::Config(format!(
                "token width {width} does not match embedding fan-in {}",
                tape.shape(weight)[0]
            )));
        }
        let projected = tape.matmul(tokens, weight)?;
        let shifted = tape.add(projected, bias)?;
        let pe = tape.constant(
            sinusoidal_pe(n_tokens, self.config.d_model),
            vec![n_tokens, self.config.d_model],
        )?;
        let positioned = tape.add(shifted, pe)?;
        tape.dropout(positioned, self.config.dropout, training, rng)
    }

    /// One head's attention map over `tokens`-axis embeddings:
    /// `softmax(Q K^T / sqrt(head_dim))` with shared `wq`/`wk`, plus
    /// attention dropout in training.
    fn head_attention(
        &self,
        tape: &mut Tape,
        x: TensorId,
        wq: TensorId,
        wk: TensorId,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let kt = tape.transpose_last2(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, 1.0 / (self.config.head_dim() as f64).sqrt())?;
        let attn = tape.softmax_last(scaled)?;
        tape.dropout(attn, self.config.dropout, training, rng)
    }

    /// Runs the full dual-branch forward pass on `tape`. `param_ids` must
    /// come from [`DetectorModel::stage`] on the same tape. Training mode
    /// needs the run's dropout stream unless dropout is zero.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        param_ids: &[TensorId],
        batch: &WindowBatch,
        training: bool,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardMaps> {
        if batch.win_size != self.config.win_size {
            return Err(Error::Config(format!(
                "batch windows have length {}, model expects {}",
                batch.win_size, self.config.win_size
            )));
        }
        if batch.channels != self.config.channels {
            return Err(Error::Config(format!(
                "batch has {} channels, model expects {}",
                batch.channels, self.config.channels
            )));
        }
        if param_ids.len() != self.params.len() {
            return Err(Error::Config(format!(
                "staged {} parameter ids, expected {}",
                param_ids.len(),
                self.params.len()
            )));
        }
        let mut fallback_rng;
        let rng = match dropout_rng {
            Some(r) => r,
            None => {
                if training && self.config.dropout > 0.0 {
                    return Err(Error::Config(
                        "training-mode forward with dropout > 0 needs a dropout stream".into(),
                    ));
                }
                fallback_rng = ChaCha8Rng::seed_from_u64(0);
                &mut fallback_rng
            }
        };

        let normalized;
        let batch = if self.config.instance_norm {
            normalized = instance_normalize(batch);
            &normalized
        } else {
            batch
        };

        let w = self.config.win_size;
        let rows = batch.batch * batch.channels;
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let mut maps = Vec::with_capacity(self.config.patch_sizes.len() * self.config.n_layers);
        for (s, &p) in self.config.patch_sizes.iter().enumerate() {
            let n = w / p;
            let (size_view, num_view) = patchify(batch, p)?;
            let size_id = tape.leaf(size_view)?;
            let num_id = tape.leaf(num_view)?;
            let base = self.scale_base(s);
            let x_pw = self.embed(
                tape,
                size_id,
                param_ids[base],
                param_ids[base + 1],
                training,
                rng,
            )?;
            let x_ip = self.embed(
                tape,
                num_id,
                param_ids[base + 2],
                param_ids[base + 3],
                training,
                rng,
            )?;
            for l in 0..self.config.n_layers {
                let lb = self.layer_base(l);
                let gamma = param_ids[lb + 2 * heads];
                let beta = param_ids[lb + 2 * heads + 1];
                let xn = tape.layer_norm_last(x_pw, gamma, beta, LN_EPS)?;
                let xp = tape.layer_norm_last(x_ip, gamma, beta, LN_EPS)?;
                let mut head_maps_n = Vec::with_capacity(heads);
                let mut head_maps_p = Vec::with_capacity(heads);
                for h in 0..heads {
                    let wq = param_ids[lb + 2 * h];
                    let wk = param_ids[lb + 2 * h + 1];
                    let xn_h = tape.slice_last(xn, h * dh, dh)?;
                    let attn_n = self.head_attention(tape, xn_h, wq, wk, training, rng)?;
                    let up_n = upsample_patchwise(tape, attn_n, p)?;
                    head_maps_n.push(tape.reshape(up_n, vec![rows, 1, w, w])?);
                    let xp_h = tape.slice_last(xp, h * dh, dh)?;
                    let attn_p = self.head_attention(tape, xp_h, wq, wk, training, rng)?;
                    let up_p = upsample_inpatch(tape, attn_p, n)?;
                    head_maps_p.push(tape.reshape(up_p, vec![rows, 1, w, w])?);
                }
                let patchwise = if heads == 1 {
                    head_maps_n[0]
                } else {
                    tape.concat_axis(&head_maps_n, 1)?
                };
                let inpatch = if heads == 1 {
                    head_maps_p[0]
                } else {
                    tape.concat_axis(&head_maps_p, 1)?
                };
                maps.push(LayerScaleMaps {
                    layer: l,
                    scale_index: s,
                    patch_size: p,
                    patchwise,
                    inpatch,
                });
            }
        }
        Ok(ForwardMaps { maps, rows, heads, win: w })
    }

    /// Deterministic eval-mode forward pass returning plain map data.
    pub fn forward_eval(&self, batch: &WindowBatch) -> Result<EvalMaps> {
        let mut tape = Tape::new();
        let ids = self.stage(&mut tape, false)?;
        let fw = self.forward_on_tape(&mut tape, &ids, batch, false, None)?;
        Ok(EvalMaps {
            maps: fw
                .maps
                .iter()
                .map(|m| EvalLayerScaleMaps {
                    layer: m.layer,
                    scale_index: m.scale_index,
                    patch_size: m.patch_size,
                    patchwise: tape.value(m.patchwise).to_vec(),
                    inpatch: tape.value(m.inpatch).to_vec(),
                })
                .collect(),
            rows: fw.rows,
            heads: fw.heads,
            win: fw.win,
        })
    }
}
