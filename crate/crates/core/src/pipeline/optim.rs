use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// A drop to `lr` from `epoch` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub epoch: usize,
    pub lr: f64,
}

/// Piecewise-constant learning rate over 0-based epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub steps: Vec<LrStep>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base: 1e-4, steps: vec![LrStep { epoch: 6, lr: 1e-5 }, LrStep { epoch: 12, lr: 1e-6 }] }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0) || self.steps.iter().any(|s| !(s.lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.steps.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
            return Err(Error::Config("schedule epochs must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.steps.iter().take_while(|s| s.epoch <= epoch).last().map_or(self.base, |s| s.lr)
    }
}

/// First and second moments plus the count of applied steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { m: zeros(), v: zeros(), step: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradient of the given parameter was not finite; nothing changed.
    Skipped { param: usize },
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn adamw_step(
    params: &mut [Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<StepOutcome> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Contract(format!("{n} parameters, {} gradients, {} moments", grads.len(), state.m.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::Contract(format!("shape mismatch at parameter {i}")));
        }
    }
    if let Some(param) = grads.iter().position(|g| !g.is_finite()) {
        return Ok(StepOutcome::Skipped { param });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 / (1.0 - b1.powi(t));
    let c2 = 1.0 / (1.0 - b2.powi(t));
    let shrink = (1.0 - lr * cfg.weight_decay) as f32;
    let (b1, b2, c1, c2, lr, eps) = (b1 as f32, b2 as f32, c1 as f32, c2 as f32, lr as f32, cfg.eps as f32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p = *p * shrink - lr * (*m * c1) / ((*v * c2).sqrt() + eps);
        }
    }
    Ok(StepOutcome::Applied)
}
