use serde::{Deserialize, Serialize};

use super::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over a fixed, ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, m: Vec::new(), v: Vec::new(), step_count: 0 }
    }

    /// Apply one update. Non-finite gradients abort before anything changes.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        for p in params.iter() {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}` at index {i}", p.name)));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::Shape("optimizer state does not match parameter list".into()));
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step_count as f64);
        let bc2 = 1.0 - beta2.powf(self.step_count as f64);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f64) -> f64 {
    let total: f64 = params.iter().flat_map(|p| p.grad.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Param::zeros("p", &[3]);
        p.value = vec![1.0, -2.0, 0.5];
        let before = p.value.clone();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = Param::zeros("p", &[1]);
        p.grad[0] = 1.0;
        let mut adam = Adam::new(AdamConfig { lr: 0.001, ..AdamConfig::default() });
        adam.step(&mut [&mut p]).unwrap();
        let expected = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((p.value[0] - expected).abs() < 1e-18);
        assert!((p.value[0] + 0.000999999).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut p = Param::zeros("p", &[2]);
        p.grad = vec![1.0, f64::NAN];
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut [&mut p]), Err(Error::NonFinite(_))));
        assert_eq!(p.value, vec![0.0, 0.0]);
        assert_eq!(adam.step_count, 0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut a = Param::zeros("a", &[2]);
        a.grad = vec![3.0, 4.0];
        let n = clip_grad_norm(&mut [&mut a], 1.0);
        assert_eq!(n, 5.0);
        assert!((a.grad[0] - 0.6).abs() < 1e-15 && (a.grad[1] - 0.8).abs() < 1e-15);
    }
}
