use log::info;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{collect_rollouts, compute_gae, ppo_update, PolicyConfig, PolicyModel, PpoConfig, RewardMode};
use crate::classifier::Subset;
use crate::dataset::{EmbeddingGridDataset, Split, Vocabulary};
use crate::env::{EnvConfig, RandomNavigator};
use crate::error::{Error, Result};
use crate::fusion::{fusion_step, train_fusion, FusionConfig, FusionEpochLog, FusionModel, FusionTrainConfig};
use crate::harness::{evaluate, Agent, EvalOptions, Predictor};
use crate::nn::{Adam, AdamConfig};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub env: EnvConfig,
    pub fusion: FusionConfig,
    /// Fusion pre-training on random-walk episodes.
    pub fusion_train: FusionTrainConfig,
    pub policy: PolicyConfig,
    pub ppo: PpoConfig,
    pub reward: RewardMode,
    /// Run validation every this many updates (0 disables it).
    pub validation_every: usize,
    /// Greedy actions when evaluating the trained policy.
    pub greedy_eval: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            fusion: FusionConfig::default(),
            fusion_train: FusionTrainConfig::default(),
            policy: PolicyConfig::default(),
            ppo: PpoConfig::default(),
            reward: RewardMode::Dense,
            validation_every: 50,
            greedy_eval: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub update: usize,
    pub mean_reward: f64,
    pub success: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub fusion_loss: f64,
    /// Per-step open top-1 on the validation objects, when evaluated.
    pub validation: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainedAgent {
    pub fusion: FusionModel,
    pub policy: PolicyModel,
    pub fusion_log: Vec<FusionEpochLog>,
    pub updates: Vec<UpdateLog>,
}

impl TrainedAgent {
    /// Training curve CSV, one row per PPO update.
    pub fn curve_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "update", "mean_reward", "success", "policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction",
            "fusion_loss", "validation_final_top1",
        ])?;
        for u in &self.updates {
            let v = u.validation.as_ref().and_then(|c| c.last()).map(|x| format!("{x:.6}")).unwrap_or_default();
            w.write_record([
                u.update.to_string(),
                format!("{:.6}", u.mean_reward),
                format!("{:.6}", u.success),
                format!("{:.6}", u.policy_loss),
                format!("{:.6}", u.value_loss),
                format!("{:.6}", u.entropy),
                format!("{:.6}", u.approx_kl),
                format!("{:.6}", u.clip_fraction),
                format!("{:.6}", u.fusion_loss),
                v,
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Train fusion on random-walk episodes, then alternate PPO updates of the
/// policy with one fusion update on the same fresh rollouts.
pub fn train_agent(
    dataset: &EmbeddingGridDataset,
    train_objects: &[usize],
    validation_objects: &[usize],
    cfg: &AgentConfig,
    seed: u64,
) -> Result<TrainedAgent> {
    cfg.ppo.validate()?;
    let vocab = Vocabulary::from_dataset(dataset);
    let pool: Vec<usize> = train_objects
        .iter()
        .copied()
        .filter(|&o| dataset.classes[dataset.objects[o].class_index as usize].split == Split::Base)
        .collect();
    if pool.is_empty() {
        return Err(Error::InvalidArgument("no base-class training objects".into()));
    }
    let mut fusion = FusionModel::new(cfg.fusion, &mut rng::stream(seed, "fusion-init", 0));
    let fusion_log =
        train_fusion(&mut fusion, dataset, &pool, &mut RandomNavigator, cfg.env, &cfg.fusion_train, rng::derive_seed(seed, "phase-a", 0))?;
    info!("fusion pre-training done: {:?}", fusion_log.last());

    let mut policy = PolicyModel::for_vocab(cfg.policy, dataset.dim, &vocab, &mut rng::stream(seed, "policy-init", 0));
    let mut ppo_adam = Adam::new(AdamConfig { lr: cfg.ppo.lr, ..AdamConfig::default() });
    let mut fusion_adam = Adam::new(cfg.fusion_train.adam);
    let mut ppo_rng = rng::stream(seed, "ppo", 0);
    let mut pick_rng = rng::stream(seed, "ppo-objects", 0);
    let val_opts = EvalOptions {
        env: cfg.env,
        predictors: vec![Predictor::Attention],
        seed: rng::derive_seed(seed, "validation", 0),
        ..EvalOptions::default()
    };
    let mut updates = Vec::with_capacity(cfg.ppo.updates);
    for u in 0..cfg.ppo.updates {
        let objects: Vec<usize> = (0..cfg.ppo.episodes_per_update).map(|_| pool[pick_rng.random_range(0..pool.len())]).collect();
        let first = (u * cfg.ppo.episodes_per_update) as u64;
        let mut buf = collect_rollouts(dataset, &objects, &policy, &fusion, &vocab, cfg.env, cfg.reward, seed, first)?;
        compute_gae(&mut buf, cfg.ppo.gamma, cfg.ppo.lambda)?;
        let stats = ppo_update(&mut policy, &mut ppo_adam, &buf, &vocab, &cfg.ppo, &mut ppo_rng)
            .map_err(|e| Error::Diverged(format!("PPO update {u}: {e}")))?;
        let records: Vec<_> = buf.episodes.iter().map(|e| e.record.clone()).collect();
        let (fusion_loss, _) = fusion_step(&mut fusion, &mut fusion_adam, &records, &vocab, cfg.fusion_train.max_grad_norm)?;

        let validation = if cfg.validation_every > 0 && !validation_objects.is_empty() && (u + 1) % cfg.validation_every == 0 {
            let agent = Agent::Policy { model: &policy, greedy: cfg.greedy_eval };
            let report = evaluate(dataset, validation_objects, agent, &fusion, &vocab, &val_opts)?;
            let curve = report.predictors[0].split(Subset::Open).top1.clone();
            info!("update {}: reward {:.4} validation {:?}", u + 1, buf.mean_reward(), curve.last());
            Some(curve)
        } else {
            None
        };
        updates.push(UpdateLog {
            update: u + 1,
            mean_reward: buf.mean_reward(),
            success: buf.success_rate(),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            clip_fraction: stats.clip_fraction,
            fusion_loss,
            validation,
        });
    }
    Ok(TrainedAgent { fusion, policy, fusion_log, updates })
}
