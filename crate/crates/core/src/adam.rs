//! Adam with per-parameter-group moment buffers.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{exp, log, sqrt};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-15 }
    }
}

/// Moment estimates for one group of scalars.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Begin a step; returns the bias-corrected step size factors.
    pub fn begin(&mut self, cfg: &AdamConfig) -> StepScale {
        self.step += 1;
        let t = self.step as i32;
        StepScale { c1: 1.0 - powi(cfg.beta1, t), c2: 1.0 - powi(cfg.beta2, t) }
    }

    /// Update scalar `i` in place.
    #[inline]
    pub fn update(&mut self, cfg: &AdamConfig, scale: StepScale, i: usize, param: &mut f64, grad: f64, lr: f64) {
        let m = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad;
        let v = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad * grad;
        self.m[i] = m;
        self.v[i] = v;
        *param -= lr * (m / scale.c1) / (sqrt(v / scale.c2) + cfg.eps);
    }

    /// One full step over a flat parameter slice.
    pub fn step_slice(&mut self, cfg: &AdamConfig, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.len());
        let scale = self.begin(cfg);
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(cfg, scale, i, p, g, lr);
        }
    }

    /// Rebuild the buffers after the parameter set was reindexed: entry `k`
    /// of the result takes the moments of `origin[k]`, or zeros for new
    /// parameters. `stride` scalars belong to each item.
    pub fn remap(&self, origin: &[Option<usize>], stride: usize) -> Self {
        let mut out = Self::new(origin.len() * stride);
        out.step = self.step;
        for (k, o) in origin.iter().enumerate() {
            if let Some(src) = *o {
                out.m[k * stride..(k + 1) * stride].copy_from_slice(&self.m[src * stride..(src + 1) * stride]);
                out.v[k * stride..(k + 1) * stride].copy_from_slice(&self.v[src * stride..(src + 1) * stride]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepScale {
    c1: f64,
    c2: f64,
}

fn powi(base: f64, exp_: i32) -> f64 {
    let mut acc = 1.0;
    let mut b = base;
    let mut e = exp_.unsigned_abs();
    while e > 0 {
        if e & 1 == 1 {
            acc *= b;
        }
        b *= b;
        e >>= 1;
    }
    if exp_ < 0 {
        1.0 / acc
    } else {
        acc
    }
}

/// Log-linear interpolation from `start` to `end` over `steps` iterations.
pub fn exponential_decay(start: f64, end: f64, step: usize, steps: usize) -> f64 {
    if steps == 0 {
        return start;
    }
    let t = (step as f64 / steps as f64).clamp(0.0, 1.0);
    exp(log(start) * (1.0 - t) + log(end) * t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(2);
        let mut p = [1.0, -1.0];
        state.step_slice(&cfg, &mut p, &[0.5, -2.0], 0.1);
        // bias-corrected first step is lr · sign(g)
        assert!((p[0] - 0.9).abs() < 1e-12);
        assert!((p[1] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig { eps: 1e-8, ..Default::default() };
        let mut state = AdamState::new(3);
        let target = [0.3, -1.2, 2.0];
        let mut p = [0.0; 3];
        for _ in 0..3000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            state.step_slice(&cfg, &mut p, &g, 0.01);
        }
        for (a, b) in p.iter().zip(&target) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn remap_keeps_moments() {
        let mut s = AdamState::new(4);
        s.m = vec![1.0, 2.0, 3.0, 4.0];
        s.v = vec![5.0, 6.0, 7.0, 8.0];
        let r = s.remap(&[Some(1), None, Some(0)], 2);
        assert_eq!(r.m, vec![3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        assert_eq!(r.v, vec![7.0, 8.0, 0.0, 0.0, 5.0, 6.0]);
    }

    #[test]
    fn decay_endpoints() {
        assert!((exponential_decay(1.6e-4, 1.6e-6, 0, 100) - 1.6e-4).abs() < 1e-18);
        assert!((exponential_decay(1.6e-4, 1.6e-6, 100, 100) - 1.6e-6).abs() < 1e-18);
        assert!((exponential_decay(1.6e-4, 1.6e-6, 50, 100) - 1.6e-5).abs() < 1e-16);
    }
}
