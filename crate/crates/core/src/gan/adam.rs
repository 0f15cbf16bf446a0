use serde::{Deserialize, Serialize};

use super::layers::{zero_grads, Param};
use super::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Param<T>]) -> Self {
        Self {
            config,
            t: 0,
            m: zero_grads(params),
            v: zero_grads(params),
        }
    }

    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Vec<T>]) {
        assert_eq!(
            params.len(),
            grads.len(),
            "one gradient per parameter tensor"
        );
        self.t += 1;
        let c = &self.config;
        let t = self.t as i32;
        let lr_t = c.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (
            T::from_f64_lossy(1.0 - c.beta1),
            T::from_f64_lossy(1.0 - c.beta2),
        );
        let (lr_t, eps) = (T::from_f64_lossy(lr_t), T::from_f64_lossy(c.epsilon));
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * *g;
                *v = b2 * *v + one_b2 * *g * *g;
                *w = *w - lr_t * *m / (v.sqrt() + eps);
            }
        }
    }
}
