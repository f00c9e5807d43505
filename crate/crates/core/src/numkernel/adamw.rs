use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW hyper-parameters (decoupled weight decay).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
}

impl AdamWState {
    pub fn new(shape: &[usize]) -> Self {
        AdamWState {
            first_moment: Tensor::zeros(shape.to_vec()),
            second_moment: Tensor::zeros(shape.to_vec()),
            step_count: 0,
        }
    }
}

/// One AdamW step on a tensor:
///
/// ```text
/// θ ← θ·(1 − lr·wd)
/// m ← β1·m + (1 − β1)·g          v ← β2·v + (1 − β2)·g²
/// θ ← θ − lr · (m / (1 − β1ᵗ)) / (√(v / (1 − β2ᵗ)) + ε)
/// ```
pub fn adamw_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamWState,
    hp: &AdamWParams,
) -> Result<()> {
    if param.shape() != grad.shape()
        || param.shape() != state.first_moment.shape()
        || param.shape() != state.second_moment.shape()
    {
        return Err(Error::dim(format!(
            "adamw: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.first_moment.shape()
        )));
    }
    state.step_count += 1;
    adamw_update(
        param.data_mut(),
        grad.data(),
        state.first_moment.data_mut(),
        state.second_moment.data_mut(),
        state.step_count,
        hp,
        hp.lr,
        hp.weight_decay,
    )?;
    param.ensure_finite("adamw_step")
}

/// Slice-level update shared by the tensor API and the trainers. `step` is
/// the 1-based step count *after* incrementing; `lr` overrides `hp.lr` so
/// schedules can drive it.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    hp: &AdamWParams,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    debug_assert!(step >= 1);
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(format!(
            "adamw: non-finite gradient {} at index {i}",
            grad[i]
        )));
    }
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    let decay = 1.0 - lr * weight_decay;
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g as f64;
        let mn = hp.beta1 * (*m as f64) + (1.0 - hp.beta1) * g;
        let vn = hp.beta2 * (*v as f64) + (1.0 - hp.beta2) * g * g;
        *m = mn as f32;
        *v = vn as f32;
        let m_hat = mn / bc1;
        let v_hat = vn / bc2;
        let theta = (*p as f64) * decay - lr * m_hat / (v_hat.sqrt() + hp.eps);
        *p = theta as f32;
    }
    Ok(())
}
