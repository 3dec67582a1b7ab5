// SPDX-License-Identifier: MIT OR Apache-2.0

use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates `params` in place from same-shaped gradient buffers.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid("parameter and gradient counts differ"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.len() != p.numel() || self.m[i].len() != g.len() {
                return Err(Error::shape("adam", format!("parameter {i}")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / b1t;
                let vh = v[j] / b2t;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq = grads.iter().flatten().fold(0.0, |s, g| s + g * g);
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = Tensor::vector(vec![3.0, -2.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = vec![x.data().iter().map(|v| 2.0 * v).collect::<Vec<_>>()];
            opt.step(&mut [&mut x], &g).unwrap();
        }
        assert!(x.max_abs() < 1e-2);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut x = Tensor::vector(vec![1.0]);
        let mut opt = Adam::new(0.0);
        opt.step(&mut [&mut x], &[vec![5.0]]).unwrap();
        assert_eq!(x.data(), &[1.0]);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }
}
