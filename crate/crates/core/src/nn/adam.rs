use serde::{Deserialize, Serialize};

use super::{Network, NnError};
use crate::scalar::Scalar;

/// Bias-corrected Adam moments for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(net: &Network<T>, lr: f64) -> Self {
        let shapes: Vec<usize> = net.named_params().iter().map(|(_, p)| p.len()).collect();
        Self::for_shapes(&shapes, lr)
    }

    pub fn for_shapes(shapes: &[usize], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// Applies one update using the gradients currently stored in `net`.
    pub fn step(&mut self, net: &mut Network<T>) -> Result<(), NnError> {
        self.apply(net.params_and_grads())
    }

    /// One update over explicit `(parameter, gradient)` pairs, in a fixed order.
    pub fn apply(&mut self, mut pairs: Vec<(&mut [T], &[T])>) -> Result<(), NnError> {
        if pairs.len() != self.m.len()
            || pairs
                .iter()
                .zip(&self.m)
                .any(|((p, _), m)| p.len() != m.len())
        {
            return Err(NnError::Shape(
                "optimizer state does not match network".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let c1 = one - T::of(self.beta1.powi(t));
        let c2 = one - T::of(self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for (((param, grad), m), v) in pairs.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
