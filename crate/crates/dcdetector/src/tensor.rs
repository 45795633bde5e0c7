//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation eagerly: each call computes the result
//! immediately and appends a node holding the output tensor plus enough
//! context to run the backward step. [`Tape::backward`] walks the nodes in
//! reverse, accumulating gradients into the `grad` buffer of every tensor
//! that requires them. Gradients accumulate across backward calls; zeroing
//! is always explicit via [`Tape::zero_grads`].
//!
//! Conventions:
//! - storage is `f64`, flat `Vec`, row-major; the scalar shape is `[]`;
//! - element-wise ops broadcast fully (NumPy rules, right-aligned);
//! - `matmul` broadcasts leading batch dimensions only;
//! - every op validates that its output is finite and fails loudly with
//!   [`Error::Numeric`] otherwise - NaN/Inf never propagate silently.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

/// A dense tensor: shape, flat row-major data, and an optional gradient
/// buffer of the same length.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from flat data, validating length and finiteness.
    pub fn from_vec(data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        if data.len() != numel(&shape) {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        ensure_finite(&data, "tensor construction")?;
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    /// Zero-filled tensor.
    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    /// A learnable parameter (`requires_grad = true`).
    pub fn param(data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        let mut t = Tensor::from_vec(data, shape)?;
        t.requires_grad = true;
        Ok(t)
    }

    /// Scalar tensor of shape `[]`.
    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    /// Total number of elements.
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Number of elements implied by a shape (the empty shape is a scalar).
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Rounds a value to the nearest `f32` and widens it back. Learnable
/// parameters are kept on this grid at all times so that the 32-bit
/// checkpoint encoding is lossless while compute stays in `f64`.
pub fn round_to_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn ensure_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value produced by {what}")))
    }
}

/// Saved context for the backward step of each operation.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: f64 },
    Log { a: TensorId },
    Exp { a: TensorId },
    SumAxis { a: TensorId, axis: usize },
    MeanAxis { a: TensorId, axis: usize },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    TransposeLast2 { a: TensorId },
    Reshape { a: TensorId },
    ConcatAxis { inputs: Vec<TensorId>, axis: usize },
    SliceLast { a: TensorId, start: usize, width: usize },
    LayerNormLast { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    RepeatInterleave { a: TensorId, axis: usize, k: usize },
    Tile { a: TensorId, axis: usize, k: usize },
    Dropout { a: TensorId, keep_scale: f64, mask: Vec<bool> },
    /// Forward-identity barrier; the backward pass never crosses it, so no
    /// input backlink is kept.
    StopGradient,
    SoftmaxLast { a: TensorId },
    RowKl { a: TensorId, b: TensorId, clamp: f64 },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Eager computation tape. All ops take and return [`TensorId`]s.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    /// Registers an existing tensor as a leaf.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<TensorId> {
        ensure_finite(&tensor.data, "leaf")?;
        Ok(self.push(tensor, Op::Leaf))
    }

    /// Registers a non-differentiable constant leaf.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(self.push(t, Op::Leaf))
    }

    /// Registers a differentiable leaf holding a copy of a parameter's data.
    pub fn watch(&mut self, param: &Tensor) -> Result<TensorId> {
        let t = Tensor::param(param.data.clone(), param.shape.clone())?;
        self.leaf(t)
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].tensor.numel(), 1);
        self.nodes[id.0].tensor.data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    /// Drops every gradient buffer on the tape.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn binary_shapes(&self, a: TensorId, b: TensorId) -> (Vec<usize>, Vec<usize>) {
        (self.nodes[a.0].tensor.shape.clone(), self.nodes[b.0].tensor.shape.clone())
    }

    fn result(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        op: Op,
        requires_grad: bool,
        what: &str,
    ) -> Result<TensorId> {
        ensure_finite(&data, what)?;
        let t = Tensor { shape, data, requires_grad, grad: None };
        Ok(self.push(t, op))
    }

    // ---- element-wise ops (full broadcasting) -------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    fn elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        what: &str,
    ) -> Result<TensorId> {
        let (sa, sb) = self.binary_shapes(a, b);
        let shape = broadcast_shapes(&sa, &sb)?;
        let da = &self.nodes[a.0].tensor.data;
        let db = &self.nodes[b.0].tensor.data;
        let out = broadcast_apply(da, &sa, db, &sb, &shape, f);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.result(out, shape, op, rg, what)
    }

    /// Multiplies by a compile-time-known scalar.
    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        if !factor.is_finite() {
            return Err(Error::Domain(format!("scale factor {factor} is not finite")));
        }
        let data: Vec<f64> = self.value(a).iter().map(|v| v * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.result(data, shape, Op::Scale { a, factor }, rg, "scale")
    }

    /// Natural logarithm; the whole input must be strictly positive.
    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if let Some(v) = self.value(a).iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        let data: Vec<f64> = self.value(a).iter().map(|v| v.ln()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.result(data, shape, Op::Log { a }, rg, "log")
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).iter().map(|v| v.exp()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.result(data, shape, Op::Exp { a }, rg, "exp")
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: TensorId, axis: usize, mean: bool) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, d, inner) = split_at_axis(&shape, axis);
        let src = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..d {
                let base = (o * d + i) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (x, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *x += s;
                }
            }
        }
        if mean {
            let inv = 1.0 / d as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let rg = self.requires_grad(a);
        let op = if mean { Op::MeanAxis { a, axis } } else { Op::SumAxis { a, axis } };
        self.result(out, new_shape, op, rg, "reduce_axis")
    }

    /// Sum of all elements, as a scalar of shape `[]`.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        self.result(vec![s], vec![], Op::SumAll { a }, rg, "sum_all")
    }

    /// Mean of all elements, as a scalar of shape `[]`.
    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.nodes[a.0].tensor.numel();
        let s: f64 = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        self.result(vec![s / n as f64], vec![], Op::MeanAll { a }, rg, "mean_all")
    }

    // ---- structural ops -------------------------------------------------

    pub fn transpose_last2(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!(
                "transpose_last2 needs >= 2 dims, got {shape:?}"
            )));
        }
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = numel(&shape[..shape.len() - 2]);
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for bi in 0..batch {
            let s = &src[bi * m * n..(bi + 1) * m * n];
            let d = &mut out[bi * m * n..(bi + 1) * m * n];
            transpose_2d(s, m, n, d);
        }
        let mut new_shape = shape.clone();
        let l = new_shape.len();
        new_shape.swap(l - 2, l - 1);
        let rg = self.requires_grad(a);
        self.result(out, new_shape, Op::TransposeLast2 { a }, rg, "transpose_last2")
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.nodes[a.0].tensor.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(a),
                shape
            )));
        }
        if shape == self.shape(a) {
            return Ok(a);
        }
        let data = self.value(a).to_vec();
        let rg = self.requires_grad(a);
        self.result(data, shape, Op::Reshape { a }, rg, "reshape")
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat_axis(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::Shape("concat_axis of zero tensors".into()));
        }
        if inputs.len() == 1 {
            return Ok(inputs[0]);
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut total = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::Shape(format!(
                    "concat_axis shape mismatch: {s:?} vs {first:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut out = vec![0.0; numel(&shape)];
        for o in 0..outer {
            let mut written = 0usize;
            for &id in inputs {
                let d = self.shape(id)[axis];
                let src = self.value(id);
                let src_block = &src[o * d * inner..(o + 1) * d * inner];
                let dst_start = (o * total + written) * inner;
                out[dst_start..dst_start + d * inner].copy_from_slice(src_block);
                written += d;
            }
        }
        let rg = inputs.iter().any(|&id| self.requires_grad(id));
        self.result(
            out,
            shape,
            Op::ConcatAxis { inputs: inputs.to_vec(), axis },
            rg,
            "concat_axis",
        )
    }

    /// Selects `[start, start+width)` along the last axis.
    pub fn slice_last(&mut self, a: TensorId, start: usize, width: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().ok_or_else(|| {
            Error::Shape("slice_last on a scalar".into())
        })?;
        if start + width > last || width == 0 {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) out of range for last dim {last}",
                start + width
            )));
        }
        if start == 0 && width == last {
            return Ok(a);
        }
        let rows = numel(&shape) / last;
        let src = self.value(a);
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            out[r * width..(r + 1) * width]
                .copy_from_slice(&src[r * last + start..r * last + start + width]);
        }
        let mut new_shape = shape.clone();
        *new_shape.last_mut().unwrap() = width;
        let rg = self.requires_grad(a);
        self.result(out, new_shape, Op::SliceLast { a, start, width }, rg, "slice_last")
    }

    /// Repeats each index along `axis` `k` times in place
    /// (`[1, 2] -> [1, 1, 1, 2, 2, 2]` for `k = 3`).
    pub fn repeat_interleave(&mut self, a: TensorId, axis: usize, k: usize) -> Result<TensorId> {
        if k == 0 {
            return Err(Error::Domain("repeat_interleave with k = 0".into()));
        }
        if k == 1 {
            return Ok(a);
        }
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, d, inner) = split_at_axis(&shape, axis);
        let src = self.value(a);
        let mut out = vec![0.0; src.len() * k];
        for o in 0..outer {
            for i in 0..d {
                let block = &src[(o * d + i) * inner..(o * d + i + 1) * inner];
                for r in 0..k {
                    let dst = (o * d * k + i * k + r) * inner;
                    out[dst..dst + inner].copy_from_slice(block);
                }
            }
        }
        let mut new_shape = shape.clone();
        new_shape[axis] *= k;
        let rg = self.requires_grad(a);
        self.result(out, new_shape, Op::RepeatInterleave { a, axis, k }, rg, "repeat_interleave")
    }

    /// Tiles the whole extent of `axis` `k` times
    /// (`[1, 2] -> [1, 2, 1, 2, 1, 2]` for `k = 3`).
    pub fn tile(&mut self, a: TensorId, axis: usize, k: usize) -> Result<TensorId> {
        if k == 0 {
            return Err(Error::Domain("tile with k = 0".into()));
        }
        if k == 1 {
            return Ok(a);
        }
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, d, inner) = split_at_axis(&shape, axis);
        let src = self.value(a);
        let mut out = vec![0.0; src.len() * k];
        for o in 0..outer {
            let block = &src[o * d * inner..(o + 1) * d * inner];
            for r in 0..k {
                let dst = (o * k + r) * d * inner;
                out[dst..dst + d * inner].copy_from_slice(block);
            }
        }
        let mut new_shape = shape.clone();
        new_shape[axis] *= k;
        let rg = self.requires_grad(a);
        self.result(out, new_shape, Op::Tile { a, axis, k }, rg, "tile")
    }

    // ---- neural-net ops --------------------------------------------------

    /// Batched matrix product `a @ b` with broadcasting over the leading
    /// batch dimensions. `a` is `[..., m, k]`, `b` is `[..., k, n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = self.binary_shapes(a, b);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!(
                "matmul needs >= 2 dims on both sides, got {sa:?} x {sb:?}"
            )));
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: {sa:?} x {sb:?}"
            )));
        }
        let batch = broadcast_shapes(&sa[..sa.len() - 2], &sb[..sb.len() - 2])?;
        let (a_off, b_off) = batch_offset_tables(&batch, &sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let da = &self.nodes[a.0].tensor.data;
        let db = &self.nodes[b.0].tensor.data;
        let mut out = vec![0.0; numel(&batch) * m * n];
        for (bi, (&ao, &bo)) in a_off.iter().zip(&b_off).enumerate() {
            mm_accum(
                &da[ao * m * ka..(ao + 1) * m * ka],
                &db[bo * ka * n..(bo + 1) * ka * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                ka,
                n,
            );
        }
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.result(out, shape, Op::MatMul { a, b }, rg, "matmul")
    }

    /// Softmax over the last axis; numerically stabilized by max
    /// subtraction, so inputs of any magnitude yield stochastic rows.
    pub fn softmax_last(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| {
            Error::Shape("softmax_last on a scalar".into())
        })?;
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for (dst, row) in out.chunks_exact_mut(n).zip(src.chunks_exact(n)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                z += *d;
            }
            let inv = 1.0 / z;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let rg = self.requires_grad(a);
        self.result(out, shape, Op::SoftmaxLast { a }, rg, "softmax_last")
    }

    /// Layer normalization over the last axis with affine parameters.
    /// Zero-variance rows normalize to zero (then `beta`) thanks to `eps`.
    pub fn layer_norm_last(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| {
            Error::Shape("layer_norm_last on a scalar".into())
        })?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::Shape(format!(
                "layer_norm_last affine params must have shape [{n}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let src = self.value(x);
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let mut out = vec![0.0; src.len()];
        for (dst, row) in out.chunks_exact_mut(n).zip(src.chunks_exact(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                dst[j] = g[j] * (row[j] - mean) * istd + b[j];
            }
        }
        let rg =
            self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        self.result(out, shape, Op::LayerNormLast { x, gamma, beta, eps }, rg, "layer_norm_last")
    }

    /// Inverted dropout. In eval mode (or with `p = 0`) this is the
    /// identity and records nothing on the tape.
    pub fn dropout(
        &mut self,
        a: TensorId,
        p: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let src = self.value(a);
        let mask: Vec<bool> = (0..src.len()).map(|_| rng.gen::<f64>() >= p).collect();
        let data: Vec<f64> = src
            .iter()
            .zip(&mask)
            .map(|(v, &m)| if m { v * keep_scale } else { 0.0 })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.result(data, shape, Op::Dropout { a, keep_scale, mask }, rg, "dropout")
    }

    /// Identity in the forward pass; blocks the gradient in the backward
    /// pass.
    pub fn stop_gradient(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.value(a).to_vec();
        let shape = self.shape(a).to_vec();
        self.result(data, shape, Op::StopGradient, false, "stop_gradient")
    }

    /// Row-wise KL divergence `sum_j a_j * (ln a_j - ln b_j)` over the last
    /// axis, with both arguments clamped below at `clamp`. The output drops
    /// the last axis (one value per row).
    pub fn row_kl(&mut self, a: TensorId, b: TensorId, clamp: f64) -> Result<TensorId> {
        let (sa, sb) = self.binary_shapes(a, b);
        if sa != sb {
            return Err(Error::Shape(format!("row_kl shape mismatch: {sa:?} vs {sb:?}")));
        }
        let n = *sa.last().ok_or_else(|| Error::Shape("row_kl on scalars".into()))?;
        let da = &self.nodes[a.0].tensor.data;
        let db = &self.nodes[b.0].tensor.data;
        let rows = da.len() / n;
        let mut out = vec![0.0; rows];
        for (r, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..n {
                let p = da[r * n + j].max(clamp);
                let q = db[r * n + j].max(clamp);
                s += p * (p.ln() - q.ln());
            }
            *o = s;
        }
        let mut shape = sa.clone();
        shape.pop();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.result(out, shape, Op::RowKl { a, b, clamp }, rg, "row_kl")
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a single-element `loss` node. Gradients accumulate
    /// into every reachable tensor with `requires_grad`; call
    /// [`Tape::zero_grads`] first if accumulation is not wanted.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].tensor.requires_grad {
                continue;
            }
            let Some(g) = adj[id].take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            self.backward_step(&mut adj, id, &g, &op);
            let t = &mut self.nodes[id].tensor;
            let grad = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
            for (pg, c) in grad.iter_mut().zip(&g) {
                *pg += c;
            }
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], id: TensorId, contribution: &[f64]) {
        let t = &self.nodes[id.0].tensor;
        if !t.requires_grad {
            return;
        }
        let grad = adj[id.0].get_or_insert_with(|| vec![0.0; t.data.len()]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Accumulates `contribution` (laid out per `out_shape`) into `id`'s
    /// gradient, summing over broadcast dimensions.
    fn accumulate_reduced(
        &self,
        adj: &mut [Option<Vec<f64>>],
        id: TensorId,
        contribution: &[f64],
        out_shape: &[usize],
        sign: f64,
    ) {
        let t = &self.nodes[id.0].tensor;
        if !t.requires_grad {
            return;
        }
        let target = t.shape.clone();
        let grad = adj[id.0].get_or_insert_with(|| vec![0.0; t.data.len()]);
        if target == out_shape {
            for (g, c) in grad.iter_mut().zip(contribution) {
                *g += sign * c;
            }
            return;
        }
        let strides = broadcast_strides(out_shape, &target);
        let mut idx = vec![0usize; out_shape.len()];
        for &c in contribution {
            let mut off = 0usize;
            for (i, s) in idx.iter().zip(&strides) {
                off += i * s;
            }
            grad[off] += sign * c;
            increment_index(&mut idx, out_shape);
        }
    }

    fn backward_step(&self, adj: &mut [Option<Vec<f64>>], out: usize, g: &[f64], op: &Op) {
        let out_shape = self.nodes[out].tensor.shape.clone();
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate_reduced(adj, *a, g, &out_shape, 1.0);
                self.accumulate_reduced(adj, *b, g, &out_shape, 1.0);
            }
            Op::Sub { a, b } => {
                self.accumulate_reduced(adj, *a, g, &out_shape, 1.0);
                self.accumulate_reduced(adj, *b, g, &out_shape, -1.0);
            }
            Op::Mul { a, b } => {
                let (sa, sb) = self.binary_shapes(*a, *b);
                let da = &self.nodes[a.0].tensor.data;
                let db = &self.nodes[b.0].tensor.data;
                let ga = broadcast_apply(g, &out_shape, db, &sb, &out_shape, |x, y| x * y);
                let gb = broadcast_apply(g, &out_shape, da, &sa, &out_shape, |x, y| x * y);
                self.accumulate_reduced(adj, *a, &ga, &out_shape, 1.0);
                self.accumulate_reduced(adj, *b, &gb, &out_shape, 1.0);
            }
            Op::Scale { a, factor } => {
                let contrib: Vec<f64> = g.iter().map(|v| v * factor).collect();
                self.accumulate(adj, *a, &contrib);
            }
            Op::Log { a } => {
                let da = &self.nodes[a.0].tensor.data;
                let contrib: Vec<f64> = g.iter().zip(da).map(|(gv, x)| gv / x).collect();
                self.accumulate(adj, *a, &contrib);
            }
            Op::Exp { a } => {
                let out_data = &self.nodes[out].tensor.data;
                let contrib: Vec<f64> = g.iter().zip(out_data).map(|(gv, y)| gv * y).collect();
                self.accumulate(adj, *a, &contrib);
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let shape = self.nodes[a.0].tensor.shape.clone();
                let (outer, d, inner) = split_at_axis(&shape, *axis);
                let scale = if matches!(op, Op::MeanAxis { .. }) { 1.0 / d as f64 } else { 1.0 };
                let mut contrib = vec![0.0; numel(&shape)];
                for o in 0..outer {
                    for i in 0..d {
                        let base = (o * d + i) * inner;
                        for x in 0..inner {
                            contrib[base + x] = g[o * inner + x] * scale;
                        }
                    }
                }
                self.accumulate(adj, *a, &contrib);
            }
            Op::SumAll { a } | Op::MeanAll { a } => {
                let n = self.nodes[a.0].tensor.numel();
                let scale = if matches!(op, Op::MeanAll { .. }) { 1.0 / n as f64 } else { 1.0 };
                let contrib = vec![g[0] * scale; n];
                self.accumulate(adj, *a, &contrib);
            }
            Op::TransposeLast2 { a } => {
                let (m, n) = {
                    let s = &out_shape;
                    (s[s.len() - 2], s[s.len() - 1])
                };
                let batch = numel(&out_shape[..out_shape.len() - 2]);
                let mut contrib = vec![0.0; g.len()];
                for bi in 0..batch {
                    transpose_2d(
                        &g[bi * m * n..(bi + 1) * m * n],
                        m,
                        n,
                        &mut contrib[bi * m * n..(bi + 1) * m * n],
                    );
                }
                self.accumulate(adj, *a, &contrib);
            }
            Op::Reshape { a } => {
                self.accumulate(adj, *a, g);
            }
            Op::ConcatAxis { inputs, axis } => {
                let total = out_shape[*axis];
                let (outer, _, inner) = split_at_axis(&out_shape, *axis);
                let mut written = 0usize;
                for &id in inputs {
                    let d = self.shape(id)[*axis];
                    let mut contrib = vec![0.0; self.nodes[id.0].tensor.numel()];
                    for o in 0..outer {
                        let src = (o * total + written) * inner;
                        contrib[o * d * inner..(o + 1) * d * inner]
                            .copy_from_slice(&g[src..src + d * inner]);
                    }
                    self.accumulate(adj, id, &contrib);
                    written += d;
                }
            }
            Op::SliceLast { a, start, width } => {
                let shape = self.nodes[a.0].tensor.shape.clone();
                let last = *shape.last().unwrap();
                let rows = numel(&shape) / last;
                let mut contrib = vec![0.0; numel(&shape)];
                for r in 0..rows {
                    contrib[r * last + start..r * last + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                self.accumulate(adj, *a, &contrib);
            }
            Op::LayerNormLast { x, gamma, beta, eps } => {
                let n = *out_shape.last().unwrap();
                let rows = g.len() / n;
                let src = self.nodes[x.0].tensor.data.clone();
                let gm = self.nodes[gamma.0].tensor.data.clone();
                let mut dx = vec![0.0; src.len()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..rows {
                    let row = &src[r * n..(r + 1) * n];
                    let go = &g[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let istd = 1.0 / (var + eps).sqrt();
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        let xh = (row[j] - mean) * istd;
                        let dxh = go[j] * gm[j];
                        dgamma[j] += go[j] * xh;
                        dbeta[j] += go[j];
                        m1 += dxh;
                        m2 += dxh * xh;
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for j in 0..n {
                        let xh = (row[j] - mean) * istd;
                        dx[r * n + j] = istd * (go[j] * gm[j] - m1 - xh * m2);
                    }
                }
                self.accumulate(adj, *x, &dx);
                self.accumulate(adj, *gamma, &dgamma);
                self.accumulate(adj, *beta, &dbeta);
            }
            Op::RepeatInterleave { a, axis, k } => {
                let shape = self.nodes[a.0].tensor.shape.clone();
                let (outer, d, inner) = split_at_axis(&shape, *axis);
                let mut contrib = vec![0.0; numel(&shape)];
                for o in 0..outer {
                    for i in 0..d {
                        let dst = &mut contrib[(o * d + i) * inner..(o * d + i + 1) * inner];
                        for r in 0..*k {
                            let src = (o * d * k + i * k + r) * inner;
                            for (c, gv) in dst.iter_mut().zip(&g[src..src + inner]) {
                                *c += gv;
                            }
                        }
                    }
                }
                self.accumulate(adj, *a, &contrib);
            }
            Op::Tile { a, axis, k } => {
                let shape = self.nodes[a.0].tensor.shape.clone();
                let (outer, d, inner) = split_at_axis(&shape, *axis);
                let mut contrib = vec![0.0; numel(&shape)];
                for o in 0..outer {
                    let dst = &mut contrib[o * d * inner..(o + 1) * d * inner];
                    for r in 0..*k {
                        let src = (o * k + r) * d * inner;
                        for (c, gv) in dst.iter_mut().zip(&g[src..src + d * inner]) {
                            *c += gv;
                        }
                    }
                }
                self.accumulate(adj, *a, &contrib);
            }
            Op::Dropout { a, keep_scale, mask } => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(mask)
                    .map(|(gv, &m)| if m { gv * keep_scale } else { 0.0 })
                    .collect();
                self.accumulate(adj, *a, &contrib);
            }
            Op::StopGradient => {
                // requires_grad is false on the output, so this arm is never
                // reached; kept for exhaustiveness.
            }
            Op::SoftmaxLast { a } => {
                let n = *out_shape.last().unwrap();
                let s = self.nodes[out].tensor.data.clone();
                let mut contrib = vec![0.0; s.len()];
                for ((c_row, s_row), g_row) in contrib
                    .chunks_exact_mut(n)
                    .zip(s.chunks_exact(n))
                    .zip(g.chunks_exact(n))
                {
                    let dot: f64 = g_row.iter().zip(s_row).map(|(gv, sv)| gv * sv).sum();
                    for j in 0..n {
                        c_row[j] = s_row[j] * (g_row[j] - dot);
                    }
                }
                self.accumulate(adj, *a, &contrib);
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = self.binary_shapes(*a, *b);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = &out_shape[..out_shape.len() - 2];
                let (a_off, b_off) =
                    batch_offset_tables(batch, &sa[..sa.len() - 2], &sb[..sb.len() - 2]);
                let da_data = self.nodes[a.0].tensor.data.clone();
                let db_data = self.nodes[b.0].tensor.data.clone();
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; da_data.len()];
                    for (bi, (&ao, &bo)) in a_off.iter().zip(&b_off).enumerate() {
                        mm_abt_accum(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &db_data[bo * k * n..(bo + 1) * k * n],
                            &mut ga[ao * m * k..(ao + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(adj, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; db_data.len()];
                    for (bi, (&ao, &bo)) in a_off.iter().zip(&b_off).enumerate() {
                        mm_atb_accum(
                            &da_data[ao * m * k..(ao + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bo * k * n..(bo + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(adj, *b, &gb);
                }
            }
            Op::RowKl { a, b, clamp } => {
                let sa = self.nodes[a.0].tensor.shape.clone();
                let n = *sa.last().unwrap();
                let da = self.nodes[a.0].tensor.data.clone();
                let db = self.nodes[b.0].tensor.data.clone();
                let rows = da.len() / n;
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; da.len()];
                    for r in 0..rows {
                        let gr = g[r];
                        for j in 0..n {
                            let idx = r * n + j;
                            if da[idx] > *clamp {
                                let p = da[idx];
                                let q = db[idx].max(*clamp);
                                ga[idx] = gr * (p.ln() - q.ln() + 1.0);
                            }
                        }
                    }
                    self.accumulate(adj, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; db.len()];
                    for r in 0..rows {
                        let gr = g[r];
                        for j in 0..n {
                            let idx = r * n + j;
                            if db[idx] > *clamp {
                                let p = da[idx].max(*clamp);
                                gb[idx] = -gr * p / db[idx];
                            }
                        }
                    }
                    self.accumulate(adj, *b, &gb);
                }
            }
        }
    }
}

// ---- shape and kernel helpers ---------------------------------------------

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let d = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, d, inner)
}

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

/// Per-output-dimension strides into a (possibly broadcast) input laid out
/// with shape `input` right-aligned against `out`.
fn broadcast_strides(out: &[usize], input: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let offset = nd - input.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1usize;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[offset + i] = acc;
        }
        acc *= input[i];
    }
    strides
}

fn increment_index(idx: &mut [usize], shape: &[usize]) {
    for i in (0..shape.len()).rev() {
        idx[i] += 1;
        if idx[i] < shape[i] {
            return;
        }
        idx[i] = 0;
    }
}

/// Applies a binary function with broadcasting. `a` is laid out with shape
/// `sa`, `b` with `sb`; the result follows `out_shape`.
fn broadcast_apply(
    a: &[f64],
    sa: &[usize],
    b: &[f64],
    sb: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if sa == sb {
        return a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect();
    }
    // Common fast path: b's shape is a suffix of a's (bias and positional
    // table adds), so b repeats block-wise.
    if sa == out_shape && sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
        let block = numel(sb);
        if block > 0 {
            let mut out = Vec::with_capacity(a.len());
            for chunk in a.chunks_exact(block) {
                out.extend(chunk.iter().zip(b).map(|(x, y)| f(*x, *y)));
            }
            return out;
        }
    }
    let total = numel(out_shape);
    let stride_a = broadcast_strides(out_shape, sa);
    let stride_b = broadcast_strides(out_shape, sb);
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        let mut oa = 0usize;
        let mut ob = 0usize;
        for (i, (stra, strb)) in idx.iter().zip(stride_a.iter().zip(&stride_b)) {
            oa += i * stra;
            ob += i * strb;
        }
        out.push(f(a[oa], b[ob]));
        increment_index(&mut idx, out_shape);
    }
    out
}

/// Flat offset tables mapping each output batch index to the corresponding
/// (broadcast) batch index of the two matmul operands.
fn batch_offset_tables(
    batch: &[usize],
    a_batch: &[usize],
    b_batch: &[usize],
) -> (Vec<usize>, Vec<usize>) {
    let total = numel(batch);
    let stride_a = broadcast_strides(batch, a_batch);
    let stride_b = broadcast_strides(batch, b_batch);
    let mut a_off = Vec::with_capacity(total);
    let mut b_off = Vec::with_capacity(total);
    let mut idx = vec![0usize; batch.len()];
    for _ in 0..total {
        let mut oa = 0usize;
        let mut ob = 0usize;
        for (i, (sa, sb)) in idx.iter().zip(stride_a.iter().zip(&stride_b)) {
            oa += i * sa;
            ob += i * sb;
        }
        a_off.push(oa);
        b_off.push(ob);
        increment_index(&mut idx, batch);
    }
    (a_off, b_off)
}

fn transpose_2d(src: &[f64], m: usize, n: usize, dst: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            dst[j * m + i] = src[i * n + j];
        }
    }
}

/// `c += a @ b` for row-major 2-D blocks (i-k-j loop order).
fn mm_accum(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (c_row, a_row) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            let av = *av;
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += g @ b^T` where `g` is `m x n` and `b` is `k x n`; `c` is `m x k`.
fn mm_abt_accum(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for (c_row, g_row) in c.chunks_exact_mut(k).zip(g.chunks_exact(n)) {
        for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(n)) {
            let mut s = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row) {
                s += gv * bv;
            }
            *cv += s;
        }
    }
}

/// `c += a^T @ g` where `a` is `m x k` and `g` is `m x n`; `c` is `k x n`.
fn mm_atb_accum(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for (a_row, g_row) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (av, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            let av = *av;
            for (cv, gv) in c_row.iter_mut().zip(g_row) {
                *cv += av * gv;
            }
        }
    }
}
