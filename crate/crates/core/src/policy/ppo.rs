use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{PolicyModel, RolloutBuffer};
use crate::dataset::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, log_softmax, softmax, Adam, Module};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_epsilon: f64,
    pub epochs: usize,
    /// Episodes per minibatch; each episode is replayed as one sequence.
    pub minibatch_episodes: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub updates: usize,
    pub episodes_per_update: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            lambda: 0.9,
            clip_epsilon: 0.2,
            epochs: 4,
            minibatch_episodes: 8,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 3e-4,
            max_grad_norm: 0.5,
            updates: 300,
            episodes_per_update: 16,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("gamma {} and lambda {} must lie in [0, 1]", self.gamma, self.lambda)));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::Config(format!("clip epsilon must be positive, got {}", self.clip_epsilon)));
        }
        if self.minibatch_episodes == 0 || self.episodes_per_update == 0 || self.epochs == 0 {
            return Err(Error::Config("PPO epochs, minibatch and episode counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Largest `|ρ − 1|` over the first pass, before any parameter change.
    pub first_pass_ratio_error: f64,
}

/// `min(ρA, clip(ρ, 1−ε, 1+ε)A)`.
pub fn clipped_objective(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// Clipped surrogate plus value and entropy terms over the given episodes,
/// averaged over their transitions. Gradients are accumulated into `policy`.
pub fn ppo_loss(policy: &mut PolicyModel, buffer: &RolloutBuffer, episodes: &[usize], vocab: &Vocabulary, cfg: &PpoConfig) -> Result<PpoStats> {
    let n: usize = episodes.iter().map(|&e| buffer.episodes[e].len).sum();
    if n == 0 {
        return Err(Error::InvalidArgument("PPO minibatch without transitions".into()));
    }
    if buffer.normalized_advantages.len() != buffer.len() {
        return Err(Error::InvalidArgument("advantages have not been computed for this buffer".into()));
    }
    let scale = 1.0 / n as f64;
    let mut stats = PpoStats::default();
    let mut clipped = 0usize;
    for &e in episodes {
        let meta = &buffer.episodes[e];
        let steps = &buffer.transitions[meta.start..meta.start + meta.len];
        let mut h = steps[0].h_prev.clone();
        let mut caches = Vec::with_capacity(steps.len());
        let mut heads = Vec::with_capacity(steps.len());
        for (k, t) in steps.iter().enumerate() {
            let (out, cache) = policy.step(&t.feature, &t.proprio, vocab, &h)?;
            let i = meta.start + k;
            let adv = buffer.normalized_advantages[i];
            let logp = log_softmax(&out.logits);
            let probs = softmax(&out.logits);
            let ratio = (logp[t.action] - t.log_prob).exp();
            let entropy: f64 = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
            let surrogate = clipped_objective(ratio, adv, cfg.clip_epsilon);
            let unclipped_active = ratio * adv <= ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * adv;
            if (ratio - 1.0).abs() > cfg.clip_epsilon {
                clipped += 1;
            }
            let v_err = out.value - buffer.returns[i];
            if !(surrogate.is_finite() && v_err.is_finite() && entropy.is_finite()) {
                return Err(Error::Diverged(format!("non-finite PPO loss at transition {i}")));
            }
            stats.policy_loss -= surrogate * scale;
            stats.value_loss += v_err * v_err * scale;
            stats.entropy += entropy * scale;
            stats.approx_kl += (t.log_prob - logp[t.action]) * scale;
            stats.first_pass_ratio_error = stats.first_pass_ratio_error.max((ratio - 1.0).abs());

            // d/dlogits of −surrogate + c_v (V−R)² − c_e H
            let g_logp = if unclipped_active { -ratio * adv } else { 0.0 };
            let d_logits: Vec<f64> = (0..probs.len())
                .map(|j| {
                    let onehot = if j == t.action { 1.0 } else { 0.0 };
                    let pg = g_logp * (onehot - probs[j]);
                    let ent = cfg.entropy_coef * probs[j] * (logp[j] + entropy);
                    (pg + ent) * scale
                })
                .collect();
            heads.push((d_logits, 2.0 * cfg.value_coef * v_err * scale));
            h = out.h_next;
            caches.push(cache);
        }
        let mut dh = vec![0.0; h.len()];
        for (cache, (d_logits, d_value)) in caches.iter().zip(&heads).rev() {
            dh = policy.backward_step(cache, d_logits, *d_value, &dh);
        }
    }
    stats.clip_fraction = clipped as f64 * scale;
    Ok(stats)
}

/// Several epochs of minibatch updates over the buffer. Each minibatch is a
/// set of whole episodes replayed from their stored initial states.
pub fn ppo_update(
    policy: &mut PolicyModel,
    adam: &mut Adam,
    buffer: &RolloutBuffer,
    vocab: &Vocabulary,
    cfg: &PpoConfig,
    rng: &mut Rng,
) -> Result<PpoStats> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..buffer.episodes.len()).collect();
    let mut total = PpoStats::default();
    let mut batches = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_episodes) {
            policy.zero_grad();
            let s = ppo_loss(policy, buffer, chunk, vocab, cfg)?;
            let mut params = policy.params_mut();
            if cfg.max_grad_norm > 0.0 {
                clip_grad_norm(&mut params, cfg.max_grad_norm);
            }
            adam.step(&mut params)?;
            total.policy_loss += s.policy_loss;
            total.value_loss += s.value_loss;
            total.entropy += s.entropy;
            total.approx_kl += s.approx_kl;
            total.clip_fraction += s.clip_fraction;
            if epoch == 0 && batches == 0 {
                total.first_pass_ratio_error = s.first_pass_ratio_error;
            }
            batches += 1;
        }
    }
    let b = batches as f64;
    total.policy_loss /= b;
    total.value_loss /= b;
    total.entropy /= b;
    total.approx_kl /= b;
    total.clip_fraction /= b;
    Ok(total)
}
