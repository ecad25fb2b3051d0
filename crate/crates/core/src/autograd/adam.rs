use std::collections::BTreeMap;

use super::{ParameterSet, Real, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    /// Rebuilds an optimizer from persisted moments.
    pub fn from_state(
        config: AdamConfig,
        step: u64,
        first: BTreeMap<String, Vec<T>>,
        second: BTreeMap<String, Vec<T>>,
    ) -> Self {
        Self { config, step, first, second }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &BTreeMap<String, Vec<T>> {
        &self.first
    }

    pub fn second_moments(&self) -> &BTreeMap<String, Vec<T>> {
        &self.second
    }

    /// Applies update number `steps() + 1` to every trainable tensor.
    pub fn step(&mut self, params: &mut ParameterSet<T>) -> Result<(), TensorError> {
        self.step_at(params, self.step + 1)
    }

    /// Applies the update for an explicit step index `t >= 1`.
    pub fn step_at(&mut self, params: &mut ParameterSet<T>, t: u64) -> Result<(), TensorError> {
        if t == 0 {
            return Err(TensorError::StepIndex);
        }
        for (name, tensor) in params.iter() {
            if tensor.requires_grad() && tensor.grad().is_none() {
                return Err(TensorError::MissingGrad(name.to_string()));
            }
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let exp = i32::try_from(t).unwrap_or(i32::MAX);
        let c1 = T::of(1.0 - beta1.powi(exp));
        let c2 = T::of(1.0 - beta2.powi(exp));
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (lr, eps) = (T::of(lr), T::of(eps));
        for (name, tensor) in params.iter_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![T::zero(); grad.len()]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((w, &g), (mi, vi)) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step = t;
        Ok(())
    }
}
