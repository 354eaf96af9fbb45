//! Adam with linear learning-rate warm-up and optional global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 100, clip_norm: Some(1.0) }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Learning rate used by the next step.
    pub fn current_lr(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 {
            self.config.lr
        } else {
            self.config.lr * ((self.step + 1) as f64 / w as f64).min(1.0)
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.rows, g.cols)).collect();
            self.v = self.m.clone();
        }
        let lr = self.current_lr();
        self.step += 1;
        let scale = match self.config.clip_norm {
            Some(c) => {
                let norm = grads.iter().flat_map(|g| &g.data).map(|x| x * x).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let AdamConfig { beta1: b1, beta2: b2, eps, .. } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i] * scale;
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                p.data[i] -= lr * (m.data[i] / bc1) / ((v.data[i] / bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = Tensor::from_vec(1, 2, vec![3.0, -2.0]);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, warmup_steps: 5, clip_norm: None, ..Default::default() });
        for _ in 0..500 {
            let g = Tensor::from_vec(1, 2, x.data.iter().map(|v| 2.0 * v).collect());
            opt.step(vec![&mut x], &[g]);
        }
        assert!(x.data.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn warm_up_is_linear() {
        let opt = Adam::new(AdamConfig { lr: 1.0, warmup_steps: 4, ..Default::default() });
        assert_eq!(opt.current_lr(), 0.25);
    }
}
