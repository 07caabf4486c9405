//! Adaptive moment estimation applied to a gradient stream.
//!
//! One implementation serves two callers: the guided sampler transforms
//! per-chain classifier gradients with `eta = 1`, and network training uses
//! the same update with a dedicated step size.

use crate::error::{Error, Result};

/// First/second moment accumulators for one gradient stream.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eta: f64,
    pub eps_num: f64,
}

impl AdamState {
    /// Guidance defaults: beta1 = 0.9, beta2 = 0.999, no dedicated step size.
    pub fn new(dim: usize) -> Self {
        Self::with_eta(dim, 1.0)
    }

    pub fn with_eta(dim: usize, eta: f64) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eta,
            eps_num: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }
}

/// Advance the moment estimates with `g` and return the bias-corrected,
/// variance-normalized gradient `eta * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_transform(g: &[f64], state: &mut AdamState) -> Result<Vec<f64>> {
    if g.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            expected: state.m.len(),
            got: g.len(),
        });
    }
    state.step_count += 1;
    let k = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(k);
    let bc2 = 1.0 - state.beta2.powi(k);
    let mut out = Vec::with_capacity(g.len());
    for (i, &gi) in g.iter().enumerate() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * gi;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * gi * gi;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        out.push(state.eta * m_hat / (v_hat.sqrt() + state.eps_num));
    }
    Ok(out)
}
