use serde::Serialize;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied as `theta -= lr * weight_decay * theta`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-12,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("adam epsilon must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Moments in parameter name order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Some gradient was not finite; nothing changed.
    Skipped,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros = |s: &ParamStore| -> Vec<Tensor> {
            s.iter().map(|(_, v, _)| Tensor::zeros(v.rows(), v.cols())).collect()
        };
        Ok(Self {
            config,
            first: zeros(store),
            second: zeros(store),
            step: 0,
        })
    }

    /// Applied steps so far.
    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<StepOutcome> {
    if state.first.len() != store.len() {
        return Err(Error::invalid(format!(
            "optimizer tracks {} tensors, store has {}",
            state.first.len(),
            store.len()
        )));
    }
    for ((_, v, _), m) in store.iter().zip(&state.first) {
        if v.shape() != m.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: v.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
    }
    if !store.grads_finite() {
        log::warn!("skipping optimizer step {}: non-finite gradient", state.step + 1);
        return Ok(StepOutcome::Skipped);
    }
    let c = state.config.clone();
    state.step += 1;
    let t = state.step as i32;
    let correct1 = 1.0 - c.beta1.powi(t);
    let correct2 = 1.0 - c.beta2.powi(t);
    for (((_, value, grad), m), v) in store.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        let (m, v, g) = (m.data_mut(), v.data_mut(), grad.data());
        for (k, theta) in value.data_mut().iter_mut().enumerate() {
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
            let m_hat = m[k] / correct1;
            let v_hat = v[k] / correct2;
            *theta -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *theta);
        }
    }
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn skips_non_finite() {
        let mut s = scalar_store(1.0);
        s.set_flat_grads(&[f64::NAN]).unwrap();
        let mut st = AdamState::new(&s, AdamConfig::default()).unwrap();
        assert_eq!(adam_step(&mut s, &mut st).unwrap(), StepOutcome::Skipped);
        assert_eq!(s.flat_values(), vec![1.0]);
        assert_eq!(st.steps(), 0);
    }
}
