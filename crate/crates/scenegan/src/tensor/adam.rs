//! Adam optimizer with bias correction.

use super::{Scalar, Tensor};
use crate::error::TensorError;
use std::collections::HashMap;

/// Optimizer hyperparameters. Defaults follow the training setup:
/// lr 2e-4, beta1 0.5, beta2 0.999, epsilon 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    pub first_moment: Tensor<F>,
    pub second_moment: Tensor<F>,
}

/// Adam over a named parameter set. Moments are allocated lazily on the first
/// update of each parameter; `step_count` advances once per [`Adam::step`].
#[derive(Debug)]
pub struct Adam<F: Scalar> {
    pub config: AdamConfig,
    pub step_count: u64,
    states: HashMap<String, AdamState<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step_count: 0,
            states: HashMap::new(),
        }
    }

    /// Applies one bias-corrected update to every `(name, param, grad)` entry.
    pub fn step(&mut self, updates: Vec<(&str, &mut Tensor<F>, &Tensor<F>)>) -> Result<(), TensorError> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = F::from_f64(self.config.beta1);
        let b2 = F::from_f64(self.config.beta2);
        let lr = F::from_f64(self.config.lr);
        let eps = F::from_f64(self.config.epsilon);
        let one = F::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);

        for (name, param, grad) in updates {
            if param.shape() != grad.shape() {
                return Err(TensorError::Dimension {
                    op: "adam_step",
                    msg: format!(
                        "param '{name}' shape {:?} vs grad {:?}",
                        param.shape(),
                        grad.shape()
                    ),
                });
            }
            if !grad.is_all_finite() {
                return Err(TensorError::NonFinite {
                    op: "adam_step",
                    context: format!("gradient of '{name}'"),
                });
            }
            let state = self.states.entry(name.to_string()).or_insert_with(|| AdamState {
                first_moment: Tensor::zeros(param.shape()),
                second_moment: Tensor::zeros(param.shape()),
            });
            if state.first_moment.shape() != param.shape() {
                return Err(TensorError::Dimension {
                    op: "adam_step",
                    msg: format!("stale moment shape for '{name}'"),
                });
            }
            let m = state.first_moment.data_mut();
            let v = state.second_moment.data_mut();
            let p = param.data_mut();
            for i in 0..p.len() {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn states(&self) -> &HashMap<String, AdamState<F>> {
        &self.states
    }

    pub fn insert_state(&mut self, name: String, state: AdamState<F>) {
        self.states.insert(name, state);
    }
}
