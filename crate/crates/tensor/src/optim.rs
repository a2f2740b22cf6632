//! Adam with a linear-warm-up / inverse-square-root learning-rate schedule.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::{Result, TensorError};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr_max: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            warmup: 4000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// `lr_max · min(t / warmup, sqrt(warmup / t))` for `t >= 1`.
pub fn lr_schedule(t: u64, lr_max: f64, warmup: u64) -> Result<f64> {
    if t == 0 {
        return Err(TensorError::Contract("learning-rate schedule is defined from step 1".into()));
    }
    if warmup == 0 {
        return Ok(lr_max / (t as f64).sqrt());
    }
    let (t, w) = (t as f64, warmup as f64);
    Ok(lr_max * (t / w).min((w / t).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> f64 {
        lr_schedule(self.step + 1, self.config.lr_max, self.config.warmup).expect("step + 1 >= 1")
    }

    /// Applies one bias-corrected Adam update from the parameters' gradient
    /// slots, consuming them. Parameters without a gradient are skipped.
    /// Returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<f64> {
        for (name, tensor) in params.iter() {
            if let (Some(g), Some(mo)) = (tensor.grad(), self.moments.get(name)) {
                if g.len() != mo.m.len() || tensor.numel() != mo.m.len() {
                    return Err(TensorError::shape(
                        "adam_step",
                        format!("{name}: state {} vs parameter {}", mo.m.len(), tensor.numel()),
                    ));
                }
            }
        }
        let t = self.step + 1;
        let lr = lr_schedule(t, self.config.lr_max, self.config.warmup)?;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let corr1 = T::from_f64(1.0 - c.beta1.powf(t as f64));
        let corr2 = T::from_f64(1.0 - c.beta2.powf(t as f64));
        let (lr_t, eps) = (T::from_f64(lr), T::from_f64(c.eps));
        for (name, tensor) in params.iter_mut() {
            let Some(g) = tensor.take_grad() else { continue };
            let n = g.len();
            let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            for (((p, &gi), m), v) in tensor.data_mut().iter_mut().zip(&g).zip(mo.m.iter_mut()).zip(mo.v.iter_mut()) {
                *m = b1 * *m + one_b1 * gi;
                *v = b2 * *v + one_b2 * gi * gi;
                let mhat = *m / corr1;
                let vhat = *v / corr2;
                *p -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step = t;
        Ok(lr)
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut OptimizerState<T>) -> Result<f64> {
    state.step(params)
}
