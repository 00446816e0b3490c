//! Adam optimizer with bias correction.

use super::{Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }
}

/// One Adam update over all parameter tensors.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::OptimizerShape {
            index: usize::MAX,
            param: vec![params.len()],
            state: vec![grads.len(), state.m.len()],
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one_m_b1 = T::of(1.0 - cfg.beta1);
    let one_m_b2 = T::of(1.0 - cfg.beta2);
    let inv_bc1 = T::of(1.0 / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let lr_t = T::of(lr);
    let eps = T::of(cfg.eps);

    for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        if param.shape() != grad.shape() || param.shape() != state.m[i].shape() {
            return Err(TensorError::OptimizerShape {
                index: i,
                param: param.shape().to_vec(),
                state: grad.shape().to_vec(),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((p, &g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m = b1 * *m + one_m_b1 * g;
            *v = b2 * *v + one_m_b2 * g * g;
            let m_hat = *m * inv_bc1;
            let v_hat = *v * inv_bc2;
            *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
