//! ADAM optimizer with bias correction and optional decoupled-from-loss L2
//! regularization (added to the raw gradient before the moment updates).

use indexmap::IndexMap;

use crate::autodiff::array::Array;
use crate::scalar::Scalar;

/// Per-parameter optimizer state. `step_count` is tracked per parameter so
/// that parameters untouched in a step keep their bias-correction schedule
/// aligned with the updates they actually received.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub step_count: u64,
    pub m: Vec<S>,
    pub v: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 penalty coefficient; `0.0` disables it.
    pub l2: f64,
    state: IndexMap<String, AdamState<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(learning_rate: f64, l2: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2,
            state: IndexMap::new(),
        }
    }

    /// Apply one update to `param` given `grad`.
    ///
    /// A gradient that is zero in every element leaves the parameter, its
    /// moments, and its step count untouched. This keeps parameters that did
    /// not participate in a batch (or whose gradient was deliberately
    /// blocked) bit-identical across the step, even when `l2 > 0`.
    pub fn step(&mut self, name: &str, param: &mut Array<S>, grad: &[S]) {
        debug_assert_eq!(param.numel(), grad.len());
        if grad.iter().all(|g| g.to_f64() == 0.0) {
            return;
        }
        let n = param.numel();
        let entry = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| AdamState {
                step_count: 0,
                m: vec![S::ZERO; n],
                v: vec![S::ZERO; n],
            });
        entry.step_count += 1;
        let t = entry.step_count as i32;

        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let lr = S::from_f64(self.learning_rate);
        let eps = S::from_f64(self.epsilon);
        let l2 = S::from_f64(self.l2);
        let bc1 = S::ONE - b1.powi(t);
        let bc2 = S::ONE - b2.powi(t);

        for (i, value) in param.data.iter_mut().enumerate() {
            let g = grad[i] + l2 * *value;
            entry.m[i] = b1 * entry.m[i] + (S::ONE - b1) * g;
            entry.v[i] = b2 * entry.v[i] + (S::ONE - b2) * g * g;
            let m_hat = entry.m[i] / bc1;
            let v_hat = entry.v[i] / bc2;
            *value -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    pub fn state(&self, name: &str) -> Option<&AdamState<S>> {
        self.state.get(name)
    }
}
