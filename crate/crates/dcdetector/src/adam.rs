//! Adam optimizer with bias correction and optional global-norm clipping.

use crate::error::{Error, Result};
use crate::tensor::{round_to_f32, Tensor};

/// Optimizer state: first/second moment estimates per parameter, plus the
/// shared step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Standard coefficients (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`)
    /// with the caller's learning rate. `sizes` fixes the parameter layout;
    /// every later [`AdamState::step`] must pass gradients in that order.
    pub fn new(lr: f64, sizes: &[usize]) -> Result<AdamState> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Domain(format!("learning rate {lr} must be positive")));
        }
        Ok(AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in place. `clip`, when set, is
    /// a cap on the global L2 norm of the concatenated gradient.
    ///
    /// Updated parameters are rounded to the nearest `f32` value: parameters
    /// live on the `f32` grid at all times (see [`round_to_f32`]) so that
    /// 32-bit checkpoints reconstruct them exactly.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&[f64]],
        clip: Option<f64>,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.data.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape(
                    "adam parameter/gradient sizes changed since initialization".into(),
                ));
            }
        }
        let clip_factor = match clip {
            Some(c) => {
                if !(c.is_finite() && c > 0.0) {
                    return Err(Error::Domain(format!("clip norm {c} must be positive")));
                }
                let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum();
                let norm = sq.sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..grad.len() {
                let g = grad[i] * clip_factor;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let next = param.data[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                if !next.is_finite() {
                    return Err(Error::Numeric(format!(
                        "adam update produced a non-finite parameter at step {}",
                        self.step
                    )));
                }
                param.data[i] = round_to_f32(next);
            }
        }
        Ok(())
    }
}
