//! Adam with bias correction and the cosine-annealed learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{HlfdError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LR_MAX: f64 = 1e-3;
pub const DEFAULT_LR_MIN: f64 = 1e-6;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }
}

/// First and second moment estimates for a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One in-place Adam update. A `None` gradient is treated as all zeros.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(HlfdError::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if state.m[i].len() != p.numel() {
            return Err(HlfdError::shape("adam_step", format!("moment {i} size mismatch")));
        }
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(HlfdError::shape(
                    "adam_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let grad = grads[i].as_ref().map(|g| g.data());
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = grad.map_or(0.0, |g| g[k]);
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(HlfdError::invalid(format!(
            "cosine_lr step {step} outside [0, {total_steps}]"
        )));
    }
    let phase = PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[&p]);
        for _ in 0..3 {
            adam_step(&mut [&mut p], &[Some(Tensor::zeros(&[3]))], &mut st, 1e-3, &AdamConfig::default()).unwrap();
            adam_step(&mut [&mut p], &[None], &mut st, 1e-3, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 6);
    }

    #[test]
    fn matches_scalar_reference_trace() {
        // Hand-rolled scalar Adam, three steps with varying gradients.
        let grads = [0.5, -1.5, 2.0];
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            w -= lr * mh / (vh.sqrt() + eps);
            trace.push(w);
        }
        // First step moves by ≈ lr against the gradient sign.
        assert!((trace[0] - (0.3 - 1e-3)).abs() < 1e-10);

        let mut p = Tensor::scalar(0.3);
        let mut st = AdamState::new(&[&p]);
        for (k, g) in grads.iter().enumerate() {
            adam_step(&mut [&mut p], &[Some(Tensor::scalar(*g))], &mut st, lr, &AdamConfig::default()).unwrap();
            assert!((p.item() - trace[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[&p]);
        let r = adam_step(&mut [&mut p], &[Some(Tensor::zeros(&[3]))], &mut st, 1e-3, &AdamConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn default_betas() {
        let c = AdamConfig::default();
        assert_eq!((c.beta1, c.beta2), (0.9, 0.999));
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let lr0 = cosine_lr(0, 100, DEFAULT_LR_MAX, DEFAULT_LR_MIN).unwrap();
        let lr_end = cosine_lr(100, 100, DEFAULT_LR_MAX, DEFAULT_LR_MIN).unwrap();
        let lr_mid = cosine_lr(50, 100, DEFAULT_LR_MAX, DEFAULT_LR_MIN).unwrap();
        assert!((lr0 - 0.001).abs() < 1e-18);
        assert!((lr_end - 0.000001).abs() < 1e-18);
        assert!((lr_mid - 5.005e-4).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 1e-3, 1e-6).is_err());
        assert!(cosine_lr(0, 0, 1e-3, 1e-6).is_err());
    }

    #[test]
    fn cosine_is_nonincreasing() {
        let lrs: Vec<f64> = (0..=37).map(|s| cosine_lr(s, 37, 1e-3, 1e-6).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
