//! Decoupled-weight-decay Adam and the cosine learning-rate schedule.

use crate::error::{Result, SacError};
use crate::nn::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers aligned with the parameter store order.
#[derive(Debug, Clone)]
pub struct AdamWState<F: Scalar> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamWState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros: Vec<Vec<F>> = store
            .iter()
            .map(|(_, _, t)| vec![F::zero(); t.numel()])
            .collect();
        AdamWState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One optimizer step. Weight decay is decoupled: parameters shrink by
/// `lr * wd * p` independently of the adaptive update, and the moments are
/// bias-corrected by the shared step counter.
pub fn adamw_step<F: Scalar>(
    store: &mut ParamStore<F>,
    grads: &[Vec<F>],
    state: &mut AdamWState<F>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(SacError::InvalidArgument {
            op: "adamw_step",
            reason: format!("{} gradients for {} parameters", grads.len(), store.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let b1 = F::from_real(cfg.beta1);
    let b2 = F::from_real(cfg.beta2);
    let one_m_b1 = F::from_real(1.0 - cfg.beta1);
    let one_m_b2 = F::from_real(1.0 - cfg.beta2);
    let inv_bc1 = F::from_real(1.0 / bc1);
    let inv_bc2 = F::from_real(1.0 / bc2);
    let eps = F::from_real(cfg.eps);
    let lr_f = F::from_real(lr);
    let decay = F::from_real(lr * cfg.weight_decay);

    for idx in 0..store.len() {
        let g = &grads[idx];
        let p = store.get_mut(crate::nn::ParamId(idx));
        if g.len() != p.numel() {
            return Err(SacError::InvalidArgument {
                op: "adamw_step",
                reason: format!(
                    "gradient length {} does not match parameter {}",
                    g.len(),
                    p.numel()
                ),
            });
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for (k, pv) in p.data_mut().iter_mut().enumerate() {
            let gv = g[k];
            // decoupled decay first
            *pv = *pv - decay * *pv;
            m[k] = b1 * m[k] + one_m_b1 * gv;
            v[k] = b2 * v[k] + one_m_b2 * gv * gv;
            let m_hat = m[k] * inv_bc1;
            let v_hat = v[k] * inv_bc2;
            *pv = *pv - lr_f * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr(t) = base * 0.5 * (1 + cos(pi * t / total))`, no warmup.
pub fn cosine_lr(step: u64, total: u64, base_lr: f64) -> Result<f64> {
    if step > total {
        return Err(SacError::InvalidArgument {
            op: "cosine_lr",
            reason: format!("step {step} past total {total}"),
        });
    }
    if total == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}
