//! Adam with bias correction, decoupled weight decay and an exponential
//! per-epoch learning-rate schedule.

use crate::error::{Error, Result};
use crate::net::ParamTensor;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    /// Fresh state with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(sizes: &[usize]) -> Self {
        Self::with_hyper(sizes, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn with_hyper(sizes: &[usize], beta1: T, beta2: T, eps: T) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One Adam update followed by `θ ← θ (1 - lr · weight_decay)` on tensors
    /// flagged for decay.
    pub fn step(&mut self, params: &mut [ParamTensor<'_, T>], grads: &[&[T]], lr: T, weight_decay: T) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::State(format!(
                "{} parameter tensors, {} gradients, {} optimizer slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.values.len() != g.len() || g.len() != self.m[i].len() {
                return Err(Error::State(format!("shape mismatch in tensor `{}`", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let shrink = if p.decay { T::one() - lr * weight_decay } else { T::one() };
            for k in 0..g.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                let updated = p.values[k] - lr * m_hat / (v_hat.sqrt() + self.eps);
                p.values[k] = updated * shrink;
            }
        }
        Ok(())
    }
}

/// `alpha0 · gamma^epoch`.
pub fn lr_at_epoch(alpha0: f64, gamma: f64, epoch: usize) -> f64 {
    alpha0 * gamma.powi(epoch as i32)
}
