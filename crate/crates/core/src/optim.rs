//! Adam updates for the per-image optimization loop.

use crate::error::{Error, Result};
use crate::net::NetParams;
use crate::tensor::Tensor;

/// First/second moment estimates for every parameter tensor, in the canonical
/// `NetParams::tensors()` order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    moments: Vec<Moment>,
}

#[derive(Debug, Clone)]
struct Moment {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    /// Zero moments, step counter 0. Defaults when unstated: `eps = 1e-8`.
    pub fn init(params: &NetParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {}", lr)));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!(
                    "{} must lie in [0, 1), got {}",
                    name, b
                )));
            }
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig(format!("eps must be > 0, got {}", eps)));
        }
        let moments = params
            .tensors()
            .into_iter()
            .map(|t| Moment { m: vec![0.0; t.numel()], v: vec![0.0; t.numel()] })
            .collect();
        Ok(Self { lr, beta1, beta2, eps, t: 0, moments })
    }

    /// One Adam step over every parameter; `grads` must align with
    /// `NetParams::tensors()`.
    pub fn step(&mut self, params: &mut NetParams, grads: &[Tensor]) -> Result<()> {
        let tensors = params.tensors_mut();
        if grads.len() != tensors.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} gradients, got {}",
                tensors.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((tensor, grad), moment) in tensors.into_iter().zip(grads).zip(&mut self.moments) {
            if grad.numel() != tensor.numel() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    grad.shape(),
                    tensor.shape()
                )));
            }
            for ((p, &g), (m, v)) in tensor
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(moment.m.iter_mut().zip(moment.v.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
