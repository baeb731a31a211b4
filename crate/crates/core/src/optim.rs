//! AdamW with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::nn::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm the gradient is rescaled to when exceeded; `<= 0` disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step<P: Parameterized>(&mut self, params: &mut P, grads: &P) -> f64 {
        let mut g = grads.to_flat();
        let mut theta = params.to_flat();
        assert_eq!(
            g.len(),
            self.m.len(),
            "optimizer built for a different model"
        );
        let norm = clip_global_norm(&mut g, self.config.grad_clip);
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for k in 0..theta.len() {
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g[k];
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g[k] * g[k];
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            theta[k] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * theta[k]);
        }
        params.set_flat(&theta);
        norm
    }
}

/// Rescales `g` in place so its L2 norm is at most `max_norm`. Returns the original norm.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mlp3;
    use crate::rng::Seed;

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = vec![0.3, 0.4];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut m = Mlp3::new([2, 3, 3, 1], Seed(0));
        let before = m.clone();
        let g = Mlp3::new([2, 3, 3, 1], Seed(1));
        let mut opt = AdamW::new(
            OptimizerConfig {
                lr: 0.0,
                ..Default::default()
            },
            m.num_params(),
        );
        for _ in 0..5 {
            opt.step(&mut m, &g);
        }
        assert_eq!(m, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(g) (up to eps) without decay
        let mut m = Mlp3::new([1, 1, 1, 1], Seed(0));
        m.zero_params();
        let mut g = m.clone();
        g.set_flat(&[0.5, -0.25, 0.1, 0.2, -0.3, 0.4]);
        let cfg = OptimizerConfig {
            lr: 0.01,
            weight_decay: 0.0,
            grad_clip: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 6);
        opt.step(&mut m, &g);
        for (p, gk) in m.to_flat().iter().zip(g.to_flat()) {
            assert!((p + 0.01 * gk.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut m = Mlp3::new([1, 1, 1, 1], Seed(2));
        let cfg = OptimizerConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, m.num_params());
        for _ in 0..500 {
            let mut g = m.clone();
            let flat: Vec<f64> = m.to_flat().iter().map(|x| 2.0 * (x - 1.0)).collect();
            g.set_flat(&flat);
            opt.step(&mut m, &g);
        }
        assert!(m.to_flat().iter().all(|x| (x - 1.0).abs() < 1e-2));
    }
}
