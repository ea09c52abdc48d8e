use rand::distr::{weighted::WeightedIndex, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PolicyModel;
use crate::classifier::{predict, Subset};
use crate::dataset::{EmbeddingGridDataset, Split, Vocabulary};
use crate::env::{reset, EnvConfig, EpisodeRecord, GridAction, Navigator, Observation};
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::linalg;
use crate::nn::{log_softmax, softmax};
use crate::rng::{self, Rng};

/// How the fused classifier's score on the true class becomes a reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Score after every move.
    #[default]
    Dense,
    /// Change in score caused by every move.
    Delta,
    /// Final score only.
    Terminal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub feature: Vec<f64>,
    pub proprio: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    /// Recurrent state the step started from.
    pub h_prev: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMeta {
    pub start: usize,
    pub len: usize,
    pub label: usize,
    /// Fused base-class probability of the true class after each observation.
    pub scores: Vec<f64>,
    /// Whether the full-episode fused base-class prediction is correct.
    pub success: bool,
    pub record: EpisodeRecord,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    pub episodes: Vec<EpisodeMeta>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// `advantages` standardized over the buffer.
    pub normalized_advantages: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn push_episode(&mut self, mut steps: Vec<Transition>, meta_without_start: EpisodeMeta) {
        let start = self.transitions.len();
        let len = steps.len();
        self.transitions.append(&mut steps);
        self.episodes.push(EpisodeMeta { start, len, ..meta_without_start });
    }

    pub fn mean_reward(&self) -> f64 {
        if self.transitions.is_empty() {
            return 0.0;
        }
        self.transitions.iter().map(|t| t.reward).sum::<f64>() / self.transitions.len() as f64
    }

    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().filter(|e| e.success).count() as f64 / self.episodes.len() as f64
    }
}

/// Sample an action index from `softmax(logits)`; returns it with its log-probability.
pub fn sample_action(logits: &[f64], rng: &mut Rng) -> (usize, f64) {
    let probs = softmax(logits);
    let a = WeightedIndex::new(&probs).expect("softmax is a valid distribution").sample(rng);
    (a, log_softmax(logits)[a])
}

/// Per-step rewards from the scores `p_1..p_T`: one reward per move.
pub fn rewards_from_scores(scores: &[f64], mode: RewardMode) -> Vec<f64> {
    let moves = scores.len().saturating_sub(1);
    (0..moves)
        .map(|k| match mode {
            RewardMode::Dense => scores[k + 1],
            RewardMode::Delta => scores[k + 1] - scores[k],
            RewardMode::Terminal if k + 1 == moves => scores[k + 1],
            RewardMode::Terminal => 0.0,
        })
        .collect()
}

/// Fused probability of `label` among the base classes after each prefix.
pub fn prefix_scores(fusion: &FusionModel, record: &EpisodeRecord, vocab: &Vocabulary) -> Result<Vec<f64>> {
    (1..=record.features.len())
        .map(|t| {
            let fused = fusion.fuse_prefix(&record.features[..t], &record.proprios[..t], vocab)?;
            let dist = predict(&fused.global_feature, vocab, Subset::Base, fusion.config.temperature)?;
            dist.prob_of(record.label)
                .ok_or_else(|| Error::InvalidArgument(format!("label {} is not a base class", record.label)))
        })
        .collect()
}

/// Run one episode with actions sampled from the policy.
pub fn rollout_episode(
    dataset: &EmbeddingGridDataset,
    object: usize,
    policy: &PolicyModel,
    fusion: &FusionModel,
    vocab: &Vocabulary,
    env: EnvConfig,
    mode: RewardMode,
    seed: u64,
) -> Result<(Vec<Transition>, EpisodeMeta)> {
    let label = dataset.objects.get(object).map(|o| o.class_index as usize);
    if label.map(|l| dataset.classes[l].split) != Some(Split::Base) {
        return Err(Error::InvalidArgument(format!("object {object} is not a base-class training object")));
    }
    let (mut ep, mut obs) = reset(dataset, object, env, seed)?;
    let mut action_rng = rng::stream(seed, "action", 0);
    let mut h = policy.initial_state();
    let mut steps = Vec::with_capacity(env.horizon.saturating_sub(1));
    let mut proprios = vec![obs.proprio.clone()];
    while !ep.is_done() {
        let (out, _) = policy.step(&obs.feature, &obs.proprio, vocab, &h)?;
        let (action, log_prob) = sample_action(&out.logits, &mut action_rng);
        steps.push(Transition {
            feature: obs.feature.clone(),
            proprio: obs.proprio.clone(),
            action,
            log_prob,
            value: out.value,
            reward: 0.0,
            done: false,
            h_prev: std::mem::replace(&mut h, out.h_next),
        });
        obs = ep.step(GridAction::from_index(action))?;
        proprios.push(obs.proprio.clone());
    }
    let record = EpisodeRecord {
        object,
        label: ep.label(),
        positions: ep.positions.clone(),
        actions: ep.actions.clone(),
        features: ep.frames.clone(),
        proprios,
    };
    let scores = prefix_scores(fusion, &record, vocab)?;
    for (s, r) in steps.iter_mut().zip(rewards_from_scores(&scores, mode)) {
        s.reward = r;
    }
    if let Some(last) = steps.last_mut() {
        last.done = true;
    }
    let fused = fusion.fuse_prefix(&record.features, &record.proprios, vocab)?;
    let success = predict(&fused.global_feature, vocab, Subset::Base, fusion.config.temperature)?.argmax() == record.label;
    let meta = EpisodeMeta { start: 0, len: steps.len(), label: record.label, scores, success, record };
    Ok((steps, meta))
}

/// Collect one episode per entry of `objects`. Episode `i` uses the seed
/// derived from `(seed, "rollout", first_index + i)`.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    dataset: &EmbeddingGridDataset,
    objects: &[usize],
    policy: &PolicyModel,
    fusion: &FusionModel,
    vocab: &Vocabulary,
    env: EnvConfig,
    mode: RewardMode,
    seed: u64,
    first_index: u64,
) -> Result<RolloutBuffer> {
    if env.horizon < 2 {
        return Err(Error::Config("rollouts need a horizon of at least 2".into()));
    }
    let episodes = objects
        .par_iter()
        .enumerate()
        .map(|(i, &o)| {
            let s = rng::derive_seed(seed, "rollout", first_index + i as u64);
            rollout_episode(dataset, o, policy, fusion, vocab, env, mode, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut buf = RolloutBuffer::default();
    for (steps, meta) in episodes {
        buf.push_episode(steps, meta);
    }
    Ok(buf)
}

/// Generalized advantage estimation over flat per-step arrays.
/// Episodes end at `done` steps; nothing is bootstrapped past them.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::InvalidArgument("advantage estimation on an empty buffer".into()));
    }
    if values.len() != n || dones.len() != n {
        return Err(Error::Shape(format!("{n} rewards, {} values, {} done flags", values.len(), dones.len())));
    }
    if !dones[n - 1] {
        return Err(Error::InvalidArgument("buffer ends mid-episode".into()));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_adv = adv[t];
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Standardize to mean 0 and unit standard deviation (std floored at 1e-8).
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    xs.iter().map(|x| (x - mean) / std).collect()
}

/// Fill the buffer's advantages, returns and normalized advantages.
pub fn compute_gae(buffer: &mut RolloutBuffer, gamma: f64, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("gamma {gamma} and lambda {lambda} must lie in [0, 1]")));
    }
    let r: Vec<f64> = buffer.transitions.iter().map(|t| t.reward).collect();
    let v: Vec<f64> = buffer.transitions.iter().map(|t| t.value).collect();
    let d: Vec<bool> = buffer.transitions.iter().map(|t| t.done).collect();
    let (adv, ret) = gae(&r, &v, &d, gamma, lambda)?;
    buffer.normalized_advantages = normalize(&adv);
    buffer.advantages = adv;
    buffer.returns = ret;
    Ok(())
}

/// Drives an episode with a trained policy, carrying its recurrent state.
pub struct PolicyNavigator<'a> {
    pub policy: &'a PolicyModel,
    pub vocab: &'a Vocabulary,
    /// Take the most probable action instead of sampling.
    pub greedy: bool,
    h: Vec<f64>,
}

impl<'a> PolicyNavigator<'a> {
    pub fn new(policy: &'a PolicyModel, vocab: &'a Vocabulary, greedy: bool) -> Self {
        Self { policy, vocab, greedy, h: policy.initial_state() }
    }
}

impl Navigator for PolicyNavigator<'_> {
    fn begin_episode(&mut self) {
        self.h = self.policy.initial_state();
    }

    fn act(&mut self, obs: &Observation, rng: &mut Rng) -> Result<GridAction> {
        let (out, _) = self.policy.step(&obs.feature, &obs.proprio, self.vocab, &self.h)?;
        let a = if self.greedy { linalg::argmax(&out.logits) } else { sample_action(&out.logits, rng).0 };
        self.h = out.h_next;
        Ok(GridAction::from_index(a))
    }
}
