use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub m: Vec<Vec<R>>,
    pub v: Vec<Vec<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn zeros(params: &[Tensor<R>]) -> Self {
        let z: Vec<Vec<R>> = params.iter().map(|p| vec![R::zero(); p.len()]).collect();
        Self { m: z.clone(), v: z }
    }
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_step<R: Real>(
    params: &mut [Tensor<R>],
    grads: &[Tensor<R>],
    state: &mut AdamState<R>,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Domain("adam step index starts at 1".into()));
    }
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::dims("adam tensor count", params.len(), (grads.len(), state.m.len(), state.v.len())));
    }
    let (b1, b2) = (R::lit(cfg.beta1), R::lit(cfg.beta2));
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    // lr * m_hat / (sqrt(v_hat) + eps) with the corrections folded into constants
    let step_size = R::lit(cfg.learning_rate / c1);
    let inv_sqrt_c2 = R::lit(1.0 / c2.sqrt());
    let eps = R::lit(cfg.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::dims("adam parameter", p.shape(), g.shape()));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (R::one() - b1) * gi;
            *vi = b2 * *vi + (R::one() - b2) * gi * gi;
            *x -= step_size * *mi / (vi.sqrt() * inv_sqrt_c2 + eps);
        }
    }
    Ok(())
}
