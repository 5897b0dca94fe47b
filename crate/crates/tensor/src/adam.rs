use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// First/second moment estimates, created lazily per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub config: AdamConfig,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            step: 0,
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }
}

/// One bias-corrected Adam update over every parameter, then clears the gradients.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if let Some(name) = params
        .iter()
        .find(|(_, p)| p.grad.is_none())
        .map(|(n, _)| n.to_string())
    {
        return Err(EngineError::State(format!(
            "parameter `{name}` has no gradient"
        )));
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let values = p.value.data_mut();
        for (i, &g) in grad.data().iter().enumerate() {
            let mi = beta1 * m.data()[i] + (1.0 - beta1) * g;
            let vi = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            values[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(value)).unwrap();
        p
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        let mut p = one_param(0.0);
        p.accumulate_grad("w", &Tensor::scalar(1.0)).unwrap();
        let mut s = AdamState::new(AdamConfig::default());
        adam_step(&mut p, &mut s).unwrap();
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((p.value("w").unwrap().item() - expect).abs() < 1e-15);
        assert_eq!(s.step, 1);
        assert!(p.grad("w").is_none());
    }

    #[test]
    fn zero_gradient_leaves_value_and_decays_moments() {
        let mut p = one_param(0.5);
        let mut s = AdamState::new(AdamConfig::default());
        p.accumulate_grad("w", &Tensor::scalar(2.0)).unwrap();
        adam_step(&mut p, &mut s).unwrap();
        let after_first = p.value("w").unwrap().item();
        let m1 = s.first_moment("w").unwrap().item();
        let v1 = s.second_moment("w").unwrap().item();
        p.accumulate_grad("w", &Tensor::scalar(0.0)).unwrap();
        adam_step(&mut p, &mut s).unwrap();
        // the bias-corrected first moment is still non-zero, so only the
        // moments themselves are guaranteed to shrink
        assert!(s.first_moment("w").unwrap().item().abs() < m1.abs());
        assert!(s.second_moment("w").unwrap().item() < v1);
        assert_ne!(after_first, 0.5);

        let mut fresh = one_param(0.5);
        let mut s2 = AdamState::new(AdamConfig::default());
        fresh.accumulate_grad("w", &Tensor::scalar(0.0)).unwrap();
        adam_step(&mut fresh, &mut s2).unwrap();
        assert_eq!(fresh.value("w").unwrap().item(), 0.5);
    }

    #[test]
    fn missing_gradient_is_a_state_error() {
        let mut p = one_param(0.0);
        let mut s = AdamState::new(AdamConfig::default());
        assert!(matches!(
            adam_step(&mut p, &mut s),
            Err(EngineError::State(_))
        ));
        assert_eq!(s.step, 0);
    }
}
