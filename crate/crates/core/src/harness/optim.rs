//! AdamW, learning-rate schedule and gradient clipping.

use super::config::{LrSchedule, OptimizerConfig};
use crate::model::{Layout, ParamSet};
use crate::tensor::Tensor;

/// Learning rate for 0-based optimizer step `step`: a linear ramp
/// `peak·(step+1)/W` over `W` warmup steps, then cosine from `peak` down to
/// `min`, reaching `min` at `step = total`.
pub fn lr_at(schedule: &LrSchedule, step: usize, warmup_steps: usize, total_steps: usize) -> f64 {
    let LrSchedule { peak, min, cosine, .. } = *schedule;
    if step < warmup_steps {
        return peak * (step + 1) as f64 / warmup_steps as f64;
    }
    if !cosine {
        return peak;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let t = ((step - warmup_steps) as f64 / span).min(1.0);
    min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Global L2 norm across all tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt()
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam with decoupled weight decay, applied only to parameters the layout
/// marks for decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    decay: Vec<bool>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig, layout: &Layout) -> Self {
        let specs = layout.specs();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            decay: specs.iter().map(|s| s.decay).collect(),
            m: specs.iter().map(|s| vec![0.0; s.numel()]).collect(),
            v: specs.iter().map(|s| vec![0.0; s.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * *x);
            }
        }
    }
}
