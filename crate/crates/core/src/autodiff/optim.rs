//! Adam with bias correction and a linear-warmup schedule.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// First/second moment buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One Adam update of `params` from `grads` at learning rate `lr`.
pub fn optimizer_step<F: Scalar>(
    params: &mut [&mut Tensor<F>],
    grads: &[Vec<F>],
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} params but {} grads", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(Error::Shape(format!("param {:?} with {} grads", p.shape(), g.len())));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![F::zero(); p.numel()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
    let (one_b1, one_b2) = (F::lit(1.0 - c.beta1), F::lit(1.0 - c.beta2));
    let step_size = F::lit(lr / bc1);
    let inv_bc2 = F::lit(1.0 / bc2);
    let eps = F::lit(c.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let data = p.data_mut();
        for i in 0..data.len() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            data[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup to `base` over `warmup_steps`, constant afterwards.
pub fn warmup_lr(base: f64, step: usize, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        base * step as f64 / warmup_steps as f64
    } else {
        base
    }
}
