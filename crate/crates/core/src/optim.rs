//! Adam with an externally supplied learning rate, and the cosine decay
//! schedule used by the attack.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self::with_config(AdamConfig { beta1, beta2, eps })
    }

    pub fn with_config(cfg: AdamConfig) -> Self {
        Self { cfg, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One bias-corrected update of every parameter in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// `0.5 * base * (1 + cos(pi * t / total))`, for iteration `t` in `1..=total`.
pub fn cosine_lr(base: f64, t: usize, total: usize) -> f64 {
    0.5 * base * (1.0 + (PI * t as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0.1, 0, 100) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-15);
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut p = vec![Tensor::new([3], vec![1.0, 1.0, 1.0]).unwrap()];
        let g = vec![Tensor::new([3], vec![2.0, -0.5, 0.0]).unwrap()];
        adam.step(&mut p, &g, 0.1);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-7);
        assert!((d[1] - 1.1).abs() < 1e-7);
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut adam = Adam::with_config(AdamConfig::default());
        let mut p = vec![Tensor::new([2], vec![3.0, -2.0]).unwrap()];
        for _ in 0..2000 {
            let g = vec![p[0].scale(2.0)];
            adam.step(&mut p, &g, 0.01);
        }
        assert!(p[0].norm() < 1e-2);
    }
}
