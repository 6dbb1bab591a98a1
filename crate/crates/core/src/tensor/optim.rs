//! SGD with momentum and weight decay, and bias-corrected Adam.
//!
//! Both optimizers keep per-parameter state that is allocated on the first
//! step and must keep matching the parameter layout afterwards.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

fn check_layout(params: &[Tensor], grads: &[Vec<f64>], state: &[Vec<f64>], op: &'static str) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(op, &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(Error::shape(op, p.shape(), &[g.len()]));
        }
    }
    if !state.is_empty() {
        if state.len() != params.len() {
            return Err(Error::shape(op, &[params.len()], &[state.len()]));
        }
        for (p, s) in params.iter().zip(state) {
            if p.numel() != s.len() {
                return Err(Error::shape(op, p.shape(), &[s.len()]));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    pub velocity: Vec<Vec<f64>>,
}

impl Default for SgdState {
    fn default() -> Self {
        SgdState::new(0.05, 0.9, 0.0005)
    }
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }
}

/// `v ← momentum·v + (g + weight_decay·p)`, then `p ← p − lr·v`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut SgdState) -> Result<()> {
    check_layout(params, grads, &state.velocity, "sgd_step")?;
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = state.momentum * *vv + (gv + state.weight_decay * *pv);
            *pv -= state.learning_rate * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(skip)]
    pub step_count: u64,
    #[serde(skip)]
    pub first_moment: Vec<Vec<f64>>,
    #[serde(skip)]
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(1e-5)
    }
}

pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    check_layout(params, grads, &state.first_moment, "adam_step")?;
    check_layout(params, grads, &state.second_moment, "adam_step")?;
    if state.first_moment.is_empty() {
        state.first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
