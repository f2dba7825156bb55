//! Adam optimizer over flat parameter slices.

use serde::{Deserialize, Serialize};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_learning_rate(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Optimizer state: first/second-moment estimates per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamParams,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamParams) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// One update step. `params` and `grads` must be the same tensors in the
    /// same fixed order on every call.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        assert_eq!(params.len(), grads.len(), "param/grad tensor count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.cfg.learning_rate;
        let eps = self.cfg.eps;
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            assert_eq!(p.len(), g.len(), "param/grad length mismatch at tensor {i}");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        // f(p) = (p - 3)^2, gradient 2(p - 3).
        let mut p = vec![0.0f32];
        let mut adam = Adam::new(AdamParams::with_learning_rate(0.05));
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 3.0)];
            adam.step(&mut [p.as_mut_slice()], &[g.as_slice()]);
        }
        assert!((p[0] - 3.0).abs() < 1e-3, "p = {}", p[0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * sign(g).
        let mut p = vec![1.0f32];
        let g = vec![0.42f32];
        let mut adam = Adam::new(AdamParams::with_learning_rate(0.1));
        adam.step(&mut [p.as_mut_slice()], &[g.as_slice()]);
        assert!((p[0] - (1.0 - 0.1)).abs() < 1e-5);
    }
}
