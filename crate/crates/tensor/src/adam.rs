//! Adam with bias correction and per-epoch exponential learning-rate decay.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Learning rate after `epoch` completed epochs: `base · decay^epoch`.
pub fn decayed_lr(base: f64, decay: f64, epoch: u32) -> f64 {
    base * decay.powi(epoch as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(base_lr: f64, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            base_lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// Rebuilds a state from stored moments.
    pub fn from_parts(base_lr: f64, t: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam moments",
                expected: vec![m.len()],
                got: vec![v.len()],
            });
        }
        for (a, b) in m.iter().zip(&v) {
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam moments",
                    expected: a.shape().to_vec(),
                    got: b.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            base_lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            t,
            m,
            v,
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One bias-corrected update of `params` at learning rate `lr`.
    ///
    /// All gradients are checked before anything is modified; a non-finite
    /// cell aborts the step and leaves params and state untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(TensorError::InvalidLearningRate(lr));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                expected: vec![self.m.len()],
                got: vec![params.len(), grads.len()],
            });
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    expected: m.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient { index: i });
            }
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
