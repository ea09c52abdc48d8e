//! Embedding-space occlusion: with some probability, blend the view toward a
//! random unit direction with strength equal to the occluder's area fraction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg;

/// Area fraction of a square patch with one third of the image side.
pub const DEFAULT_OCCLUSION_STRENGTH: f64 = 1.0 / 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionConfig {
    pub prob: f64,
    pub strength: f64,
    /// Resample per visit (`false`) or fix one draw per cell for the episode.
    pub sticky: bool,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self { prob: 0.0, strength: DEFAULT_OCCLUSION_STRENGTH, sticky: false }
    }
}

impl OcclusionConfig {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn with_prob(prob: f64) -> Self {
        Self { prob, ..Self::default() }
    }

    pub fn is_active(&self) -> bool {
        self.prob > 0.0 && self.strength > 0.0
    }
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = linalg::normalized(&g) {
            return u;
        }
    }
}

/// Corrupt a unit feature with probability `prob`.
///
/// The Bernoulli draw is always consumed; the noise direction only when the
/// view is occluded. `strength` is clamped into `[0, 1]`.
pub fn apply_occlusion<R: Rng + ?Sized>(feature: &[f64], prob: f64, strength: f64, rng: &mut R) -> Vec<f64> {
    let occluded = rng.random::<f64>() < prob;
    if !occluded {
        return feature.to_vec();
    }
    let beta = strength.clamp(0.0, 1.0);
    let u = random_unit(feature.len(), rng);
    if beta == 0.0 {
        return feature.to_vec();
    }
    let blend: Vec<f64> = feature.iter().zip(&u).map(|(f, n)| (1.0 - beta) * f + beta * n).collect();
    linalg::normalized(&blend).unwrap_or(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn unit(dim: usize, seed: u64) -> Vec<f64> {
        random_unit(dim, &mut rng::from_seed(seed))
    }

    #[test]
    fn zero_probability_is_identity() {
        let f = unit(16, 1);
        let mut r = rng::from_seed(2);
        for _ in 0..100 {
            assert_eq!(apply_occlusion(&f, 0.0, 0.5, &mut r), f);
        }
    }

    #[test]
    fn full_strength_returns_noise_direction() {
        let f = unit(16, 1);
        let g = unit(16, 9);
        let a = apply_occlusion(&f, 1.0, 1.0, &mut rng::from_seed(5));
        let b = apply_occlusion(&g, 1.0, 1.0, &mut rng::from_seed(5));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((linalg::norm(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_strength_keeps_views_close() {
        // Monte-Carlo estimate of the blend geometry
        let mut r = rng::from_seed(11);
        let mut total = 0.0;
        let n = 10_000;
        for i in 0..n {
            let f = unit(64, 100 + i);
            let o = apply_occlusion(&f, 1.0, DEFAULT_OCCLUSION_STRENGTH, &mut r);
            assert!((linalg::norm(&o) - 1.0).abs() < 1e-6);
            total += linalg::dot(&f, &o);
        }
        assert!(total / n as f64 >= 0.95, "mean cosine {}", total / n as f64);
    }

    #[test]
    fn strength_is_clamped() {
        let f = unit(8, 1);
        let a = apply_occlusion(&f, 1.0, 3.0, &mut rng::from_seed(4));
        let b = apply_occlusion(&f, 1.0, 1.0, &mut rng::from_seed(4));
        assert_eq!(a, b);
    }
}
