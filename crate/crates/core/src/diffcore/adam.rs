use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const DEFAULT_LEARNING_RATE: f32 = 2.5e-4;
pub const DEFAULT_CLIP_NORM: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global L2 norm the concatenated gradient is clipped to.
    pub clip_norm: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }
}

/// Moment accumulators for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    first_moments: Vec<Tensor>,
    second_moments: Vec<Tensor>,
    steps: u64,
}

/// Diagnostics from one [`adam_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f32,
    /// Factor the gradients were multiplied by (1 when under the limit).
    pub clip_scale: f32,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let first_moments: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            config,
            second_moments: first_moments.clone(),
            first_moments,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Global-norm clipping followed by a bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<StepStats> {
    if params.len() != grads.len() || params.len() != state.first_moments.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moments.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moments[i].shape() {
            return Err(Error::Shape(format!(
                "param {i}: {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite gradient for param {i}"
        )));
    }

    let cfg = state.config;
    let grad_norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    let clip_scale = if grad_norm > f64::from(cfg.clip_norm) {
        (f64::from(cfg.clip_norm) / (grad_norm + 1e-6)) as f32
    } else {
        1.0
    };

    state.steps += 1;
    let t = state.steps as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let step_size = cfg.learning_rate / bias1;
    let bias2_sqrt = bias2.sqrt();

    for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moments[i].data_mut();
        let v = state.second_moments[i].data_mut();
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            let g = g * clip_scale;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= step_size * *m / (v.sqrt() / bias2_sqrt + cfg.eps);
        }
        if !param.is_finite() {
            return Err(Error::Divergence(format!("param {i} became non-finite")));
        }
    }
    Ok(StepStats {
        grad_norm: grad_norm as f32,
        clip_scale,
    })
}
