//! Adam with bias correction, plus the learning-rate schedules used by the
//! trainer.

use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay
    /// to 0 at `total`.
    WarmupLinear { peak: f64, warmup: u64, total: u64 },
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::WarmupLinear { peak, warmup, total } => {
                if step < warmup {
                    peak * step as f64 / warmup as f64
                } else if step >= total {
                    0.0
                } else {
                    let span = (total - warmup).max(1) as f64;
                    peak * (total - step) as f64 / span
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub schedule: LrSchedule,
    step: u64,
    first: BTreeMap<ParamId, Vec<f64>>,
    second: BTreeMap<ParamId, Vec<f64>>,
}

impl OptimizerState {
    /// Allocates moments for exactly the trainable parameters of `store`.
    pub fn new(store: &ParamStore, config: AdamConfig, schedule: LrSchedule) -> Self {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for id in store.trainable_ids() {
            let n = store.get(id).numel();
            first.insert(id, vec![0.0; n]);
            second.insert(id, vec![0.0; n]);
        }
        Self { config, schedule, step: 0, first, second }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.first.keys().copied()
    }

    /// Learning rate the schedule prescribes for the next update.
    pub fn scheduled_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }
}

/// One bias-corrected Adam update over every trainable parameter that holds
/// a gradient. Increments the step counter.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(NumError::Contract(format!("learning rate {lr} is not a finite non-negative value")));
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for id in store.trainable_ids() {
        let (Some(m), Some(v)) = (state.first.get_mut(&id), state.second.get_mut(&id)) else {
            return Err(NumError::Contract(format!(
                "no optimizer moments for trainable parameter {}",
                store.name(id)
            )));
        };
        let tensor = store.get_mut(id);
        let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else { continue };
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}
