//! Adam optimizer with bias correction and a constant learning rate.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 5e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates for an ordered list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step_count: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        let m: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { config, step_count: 0, v: m.clone(), m }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected update of every parameter in place.
    ///
    /// `grads[i]` must be present and shaped like `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(contract_err!(
                "adam state tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or_else(|| contract_err!("missing gradient for parameter {i}"))?;
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(shape_err!("parameter {i}: shape {:?}, grad {:?}", p.shape(), g.shape()));
            }
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as f64;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - libm::pow(c.beta1, t));
        let bc2 = T::of(1.0 - libm::pow(c.beta2, t));
        let lr = T::of(c.learning_rate);
        let eps = T::of(c.epsilon);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = g.expect("checked above");
            let pd = p.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                let mj = &mut m.data_mut()[j];
                *mj = b1 * *mj + (T::one() - b1) * gj;
                let vj = &mut v.data_mut()[j];
                *vj = b2 * *vj + (T::one() - b2) * gj * gj;
                let m_hat = m.data()[j] / bc1;
                let v_hat = v.data()[j] / bc2;
                pd[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
