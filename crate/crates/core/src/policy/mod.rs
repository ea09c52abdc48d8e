//! Recurrent actor-critic navigation policy and its PPO trainer.

mod model;
mod ppo;
mod rollout;
mod train;

pub use model::{InputMode, PolicyConfig, PolicyModel, PolicyOutput, StepCache};
pub use ppo::{clipped_objective, ppo_loss, ppo_update, PpoConfig, PpoStats};
pub use rollout::{
    collect_rollouts, compute_gae, gae, normalize, prefix_scores, rewards_from_scores, rollout_episode, sample_action,
    EpisodeMeta, PolicyNavigator, RewardMode, RolloutBuffer, Transition,
};
pub use train::{train_agent, AgentConfig, TrainedAgent, UpdateLog};
