//! SGD with momentum, gradient clipping and the learning-rate schedule.

use std::f64::consts::PI;

/// Linear warm-up over `warmup` steps, then cosine decay to zero at `total`.
pub fn cosine_lr(step: usize, total: usize, base: f64, warmup: usize) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * base * (1.0 + (PI * progress).cos())
}

/// Scales all gradients so their joint L2 norm is at most `threshold`.
/// Returns the norm before clipping. A non-positive threshold disables it.
pub fn clip_grad_l2(grads: &mut [&mut [f64]], threshold: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if threshold > 0.0 && norm > threshold {
        let s = threshold / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdCfg {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one per parameter block.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    buffers: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// `buf = m·buf + g + wd·p; p -= lr·buf`, block by block. Buffers start at zero.
pub fn sgd_step(params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64, cfg: SgdCfg, state: &mut SgdState) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient block count");
    if state.buffers.len() != params.len() {
        state.buffers = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut state.buffers) {
        assert_eq!(p.len(), g.len(), "parameter/gradient block length");
        for ((pi, gi), bi) in p.iter_mut().zip(g.iter()).zip(buf.iter_mut()) {
            *bi = cfg.momentum * *bi + gi + cfg.weight_decay * *pi;
            *pi -= lr * *bi;
        }
    }
}
