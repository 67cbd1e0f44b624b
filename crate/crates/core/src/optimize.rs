//! Full-batch Adam and learning-rate schedules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("parameter/gradient layout mismatch: {0}")]
    Layout(String),
}

/// Adam hyperparameters; `Default` gives the usual `(1e-3, 0.9, 0.999, 1e-8)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers for one parameter set, flattened in the caller's slice order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One Adam update at the configured learning rate.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), OptimError> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// One Adam update with an explicit learning rate (for schedules).
    ///
    /// Gradients are checked before anything is modified, so a non-finite
    /// gradient leaves parameters and state untouched.
    pub fn step_with_lr(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<(), OptimError> {
        if params.len() != grads.len() {
            return Err(OptimError::Layout(format!(
                "{} parameter blocks vs {} gradient blocks",
                params.len(),
                grads.len()
            )));
        }
        let mut total = 0;
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(OptimError::Layout(format!(
                    "block {i}: {} parameters vs {} gradients",
                    p.len(),
                    g.len()
                )));
            }
            total += p.len();
        }
        if total != self.m.len() {
            return Err(OptimError::Layout(format!(
                "state sized for {} parameters, got {total}",
                self.m.len()
            )));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(OptimError::NonFiniteGradient { step: self.t + 1 });
        }

        self.t += 1;
        let AdamConfig {
            beta1, beta2, epsilon, ..
        } = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        let mut offset = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            let n = p.len();
            let m = &mut self.m[offset..offset + n];
            let v = &mut self.v[offset..offset + n];
            for (((theta, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            offset += n;
        }
        Ok(())
    }
}

/// `lr0 / factor^⌊t / every⌋`.
pub fn step_decay(lr0: f64, factor: f64, every: u64, t: u64) -> f64 {
    let halvings = (t / every.max(1)) as i32;
    lr0 / factor.powi(halvings)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    StepDecay { factor: f64, every: u64 },
}

impl LrSchedule {
    pub fn lr_at(&self, lr0: f64, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant => lr0,
            LrSchedule::StepDecay { factor, every } => step_decay(lr0, factor, every, t),
        }
    }
}
