//! Optimization: Adam, global-norm gradient clipping, the epoch loop with
//! dev-accuracy early stopping, and checkpoints.

mod checkpoint;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ManifestEntry, TrainerSnapshot};
pub use trainer::{
    evaluate, exact_match, train, Clock, EpochRecord, LogRecord, StepRecord, TrainOptions,
    TrainOutcome, Trainer,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Global gradient-norm threshold.
    pub clip_norm: f64,
    pub dropout: f64,
    pub batch_size: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Dev sentences greedily decoded per epoch for the exact-match metric.
    pub exact_match_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            clip_norm: 5.0,
            dropout: 0.5,
            batch_size: 64,
            patience: 3,
            max_epochs: 20,
            seed: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            exact_match_limit: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidHyperparameter(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return bad("batch_size and patience must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }
}

/// Pre-clip norm and the factor applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipReport {
    pub norm: f64,
    pub scale: f64,
}

/// Rescales all gradients by `threshold / g` when their global L2 norm `g`
/// exceeds `threshold`.
pub fn clip_gradients<F: Real>(grads: &mut [&mut [F]], threshold: f64) -> Result<ClipReport> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::InvalidHyperparameter(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm <= threshold {
        return Ok(ClipReport { norm, scale: 1.0 });
    }
    let scale = threshold / norm;
    let s = F::of(scale);
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|x| *x *= s);
    }
    Ok(ClipReport { norm, scale })
}

/// Clips the gradient slots of `tensors`; tensors without a slot are skipped.
pub fn clip_tensor_gradients<F: Real>(tensors: &mut [&mut Tensor<F>], threshold: f64) -> Result<ClipReport> {
    let mut grads: Vec<&mut [F]> = tensors
        .iter_mut()
        .filter(|t| t.grad().is_some())
        .map(|t| t.grad_mut())
        .collect();
    clip_gradients(&mut grads, threshold)
}

/// Bias-corrected Adam moments for an ordered list of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    /// Zero moments shaped like `shapes`.
    pub fn new(shapes: &[Vec<usize>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_config(shapes: &[Vec<usize>], c: &TrainConfig) -> Self {
        Self::new(shapes, c.lr, c.beta1, c.beta2, c.eps)
    }

    /// One update from the gradient slots of `params` (missing slot = zero).
    pub fn step(&mut self, params: &mut [&mut Tensor<F>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::StateCorruption(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(Error::StateCorruption(format!(
                    "tensor {i}: parameter shape {:?} vs moment shape {:?}",
                    p.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let step_size = F::of(self.lr / c1);
        let inv_sqrt_c2 = F::of(1.0 / c2.sqrt());
        let eps = F::of(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let grad: Vec<F> = match p.grad() {
                Some(g) => g.to_vec(),
                None => vec![F::zero(); p.len()],
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                // theta -= lr * m_hat / (sqrt(v_hat) + eps)
                *theta -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_c2 + eps);
            }
        }
        Ok(())
    }
}
