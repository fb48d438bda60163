//! Adam with decoupled weight decay.
//!
//! Standard bias-corrected moment estimates; the weight-decay term is applied
//! directly to the parameters after the adaptive step (not mixed into the
//! gradient), scaled by the learning rate, for every parameter tensor.

use crate::linalg::Real;

pub const ADAM_EPSILON: f64 = 1e-8;

/// Optimizer state for a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam<T = f32> {
    learning_rate: T,
    beta1: T,
    beta2: T,
    weight_decay: T,
    epsilon: T,
    step: u32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, weight_decay: f64, sizes: &[usize]) -> Self {
        Self {
            learning_rate: T::from_f64(learning_rate),
            beta1: T::from_f64(beta1),
            beta2: T::from_f64(beta2),
            weight_decay: T::from_f64(weight_decay),
            epsilon: T::from_f64(ADAM_EPSILON),
            step: 0,
            m: sizes.iter().map(|&s| vec![T::ZERO; s]).collect(),
            v: sizes.iter().map(|&s| vec![T::ZERO; s]).collect(),
        }
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }

    /// One update over all tensors. `params` and `grads` must match the
    /// layout the optimizer was created with.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::ONE - pow_int(self.beta1, t);
        let bc2 = T::ONE - pow_int(self.beta2, t);
        let decay = self.learning_rate * self.weight_decay;
        for (tensor_idx, (param, grad)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let m = &mut self.m[tensor_idx];
            let v = &mut self.v[tensor_idx];
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (T::ONE - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (T::ONE - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let p = param[i] - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                param[i] = p - decay * p;
            }
        }
    }
}

fn pow_int<T: Real>(base: T, exp: i32) -> T {
    let mut out = T::ONE;
    for _ in 0..exp {
        out = out * base;
    }
    out
}
