use serde::{Deserialize, Serialize};

use super::{Array, Grads, ParamStore};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// First (1-based) epoch that runs at a decayed rate.
    pub decay_start_epoch: usize,
    pub clip_norm: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            decay_factor: 0.5,
            decay_start_epoch: 9,
            clip_norm: 5.0,
        }
    }
}

impl SgdConfig {
    /// Learning rate for a 1-based epoch.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let steps = (epoch + 1).saturating_sub(self.decay_start_epoch);
        self.learning_rate * self.decay_factor.powi(steps as i32)
    }
}

/// Rescales `grads` so the global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

fn check_aligned(params: &ParamStore, grads: &Grads) -> Result<()> {
    if params.len() != grads.0.len()
        || params
            .values()
            .iter()
            .zip(&grads.0)
            .any(|(p, g)| p.shape() != g.shape())
    {
        return Err(invalid("gradients are not aligned with parameters"));
    }
    Ok(())
}

/// Clipped SGD step; returns the learning rate used.
pub fn sgd_step(params: &mut ParamStore, grads: &Grads, config: &SgdConfig, epoch: usize) -> Result<f64> {
    check_aligned(params, grads)?;
    let mut g = grads.clone();
    clip_global_norm(&mut g, config.clip_norm);
    let lr = config.rate_at(epoch);
    for (p, g) in params.values_mut().iter_mut().zip(&g.0) {
        p.add_scaled(g, -lr);
    }
    Ok(lr)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Array>,
    second: Vec<Array>,
}

impl AdamState {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Array> = params.values().iter().map(|a| Array::zeros(a.shape())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

pub fn adam_step(params: &mut ParamStore, grads: &Grads, state: &mut AdamState) -> Result<()> {
    check_aligned(params, grads)?;
    if state.first.len() != params.len()
        || state
            .first
            .iter()
            .zip(params.values())
            .any(|(m, p)| m.shape() != p.shape())
    {
        return Err(invalid("adam state does not mirror parameter shapes"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.learning_rate);
    for (((p, g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(&grads.0)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
