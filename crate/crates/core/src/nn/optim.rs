//! AdamW and the warmup-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{ParameterStore, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Moments are allocated on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    /// Restores a saved state; `first`/`second` are per-parameter in store order.
    pub fn from_state(config: AdamWConfig, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<Self> {
        if first.len() != second.len() {
            return Err(shape_err!("moment lists differ in length"));
        }
        for (m, v) in first.iter().zip(&second) {
            if m.shape() != v.shape() {
                return Err(shape_err!("moment shapes {:?} vs {:?}", m.shape(), v.shape()));
            }
        }
        Ok(Self {
            config,
            first,
            second,
            step,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// One update of every parameter in `store` from its accumulated gradient:
    /// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        if self.first.is_empty() {
            self.first = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != store.len() {
            return Err(shape_err!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            ));
        }
        self.step += 1;
        let AdamWConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (value, grad) = store.value_and_grad_mut(id);
            let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
            if m.shape() != value.shape() || grad.shape() != value.shape() {
                return Err(shape_err!("parameter {idx}: optimizer state shape mismatch"));
            }
            for (((p, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p *= decay;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup ({warmup_steps}) must be shorter than the schedule ({total_steps})"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        self.lr_at_position(step as f64)
    }

    /// Learning rate at a fractional position in `[0, total_steps]`.
    pub fn lr_at_position(&self, pos: f64) -> Result<f64> {
        let total = self.total_steps as f64;
        let warm = self.warmup_steps as f64;
        if !(0.0..=total).contains(&pos) {
            return Err(Error::InvalidArgument(format!(
                "schedule position {pos} outside [0, {}]",
                self.total_steps
            )));
        }
        if pos < warm {
            return Ok(self.base_lr * pos / warm);
        }
        let progress = (pos - warm) / (total - warm);
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

pub fn lr_at(schedule: &LrSchedule, step: usize) -> Result<f64> {
    schedule.lr_at(step)
}
