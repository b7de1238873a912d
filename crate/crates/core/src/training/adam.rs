use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Exponential learning-rate decay from `start` at step 0 to `end` at the last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(start: f64, end: f64, total_steps: usize) -> Result<Self> {
        if !(start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must be positive, got {start} -> {end}"
            )));
        }
        Ok(LrSchedule {
            start,
            end,
            total_steps,
        })
    }

    /// Learning rate for zero-based `step`; clamps past the end.
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.start;
        }
        let last = self.total_steps - 1;
        if step >= last {
            return self.end;
        }
        let frac = step as f64 / last as f64;
        self.start * (self.end / self.start).powf(frac)
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
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every trainable entry of a store.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub schedule: LrSchedule,
    step: usize,
    // indexed by store position; buffers hold empty moments
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig, schedule: LrSchedule) -> Self {
        let moments = || {
            store
                .entries()
                .iter()
                .map(|e| (e.kind == ParamKind::Trainable).then(|| Tensor::zeros(e.value.shape())))
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            schedule,
            step: 0,
            first: moments(),
            second: moments(),
        }
    }

    /// Number of completed steps.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One bias-corrected update at the scheduled rate, using the gradients in `store`.
    ///
    /// Rejects the step, leaving parameters and moments untouched, if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<f64> {
        if self.first.len() != store.len() {
            return Err(Error::shape("optimizer state does not match parameter store"));
        }
        for id in store.trainable_ids() {
            if !store.grad(id).all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}`",
                    store.entry(id).name
                )));
            }
        }
        let lr = self.schedule.lr(self.step);
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(eps);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let i = id.0;
            let (Some(m), Some(v)) = (self.first[i].as_mut(), self.second[i].as_mut()) else {
                return Err(Error::shape("parameter kind changed after optimizer creation"));
            };
            let grad = store.grad(id).clone();
            let value = store.value_mut(id);
            for (((p, mi), vi), &g) in value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad.data())
            {
                *mi = b1 * *mi + ob1 * g;
                *vi = b2 * *vi + ob2 * g * g;
                *p -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(lr)
    }
}
