use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numcore::Matrix;

/// Linear warmup from 0 to `peak` over `round(warmup_ratio * total)` steps,
/// then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(LabError::Input("total_steps must be >= 1".into()));
    }
    if step > total_steps {
        return Err(LabError::Input(format!("step {step} beyond total_steps {total_steps}")));
    }
    let warmup = (warmup_ratio * total_steps as f64).round() as usize;
    let lr = if step == total_steps {
        0.0
    } else if step < warmup {
        peak * (step as f64 / warmup as f64)
    } else {
        peak * ((total_steps - step) as f64 / (total_steps - warmup) as f64)
    };
    Ok(lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update using each parameter's gradient buffer.
///
/// Decay is decoupled: `θ ← θ − lr·wd·θ`, then the bias-corrected Adam step.
/// Frozen matrices are skipped.
pub fn adamw_step(params: &mut [&mut Matrix], state: &mut AdamState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(LabError::Input(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    let next = state.t + 1;
    for (i, p) in params.iter().enumerate() {
        if let Some(g) = p.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(LabError::Divergence {
                    step: next as usize,
                    detail: format!("non-finite gradient in parameter {i}"),
                });
            }
        }
    }
    state.t = next;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.requires_grad() {
            continue;
        }
        let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]);
        for (k, theta) in p.data_mut().iter_mut().enumerate() {
            let g = grad[k];
            *theta -= lr * cfg.weight_decay * *theta;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
