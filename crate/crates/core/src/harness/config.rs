use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Predictor;
use crate::dataset::{SynthConfig, DEFAULT_OCCLUSION_STRENGTH};
use crate::error::{Error, Result};
use crate::policy::AgentConfig;

/// Where the dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// An existing AOVR1 container. When unset, a synthetic world is
    /// generated from `[synth]`.
    pub path: Option<PathBuf>,
    /// Held-out objects per class, used when the container does not record it.
    pub test_objects_per_class: usize,
    /// Training objects per class held out for validation during training.
    pub validation_objects_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { path: None, test_objects_per_class: 20, validation_objects_per_class: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvestigateConfig {
    pub temperature: f64,
    /// Uniformly sampled views per object in the random-vs-best study.
    pub random_runs: usize,
    pub occlusion_probs: Vec<f64>,
    pub occlusion_strength: f64,
}

impl Default for InvestigateConfig {
    fn default() -> Self {
        Self { temperature: 1.0, random_runs: 10, occlusion_probs: vec![0.2, 0.35, 0.5], occlusion_strength: DEFAULT_OCCLUSION_STRENGTH }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Random,
    LargestStep,
    Policy,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Random => "random",
            AgentKind::LargestStep => "largest_step",
            AgentKind::Policy => "policy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Episodes per test object.
    pub repeats: usize,
    pub agents: Vec<AgentKind>,
    pub predictors: Vec<Predictor>,
    /// Episodes written by the `trace` stage.
    pub trace_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repeats: 1,
            agents: vec![AgentKind::Random, AgentKind::LargestStep, AgentKind::Policy],
            predictors: Predictor::ALL.to_vec(),
            trace_episodes: 20,
        }
    }
}

/// Complete description of one experiment. Every field has a default, so an
/// empty file is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the thread pool decide.
    pub threads: usize,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub synth: SynthConfig,
    pub investigate: InvestigateConfig,
    pub agent: AgentConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            synth: SynthConfig::default(),
            investigate: InvestigateConfig::default(),
            agent: AgentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Short hash of everything that affects results (output location and
    /// thread count excluded).
    pub fn fingerprint(&self) -> Result<String> {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.threads = 0;
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(hex::encode(&digest[..8]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::default();
        c.seed = 7;
        c.agent.ppo.updates = 12;
        c.eval.agents = vec![AgentKind::Random];
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = ExperimentConfig::from_toml("seed = 3\n[agent.ppo]\nupdates = 5\n[synth]\nnum_base = 4\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.agent.ppo.updates, 5);
        assert_eq!(c.agent.ppo.gamma, 0.95);
        assert_eq!(c.synth.num_base, 4);
        assert_eq!(c.synth.num_novel, 10);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        assert!(ExperimentConfig::from_toml("seed = \"x\"").is_err());
        assert!(ExperimentConfig::from_toml("sede = 3").is_err());
        assert!(ExperimentConfig::from_toml("[agent.ppo]\ngama = 0.5").is_err());
    }

    #[test]
    fn fingerprint_ignores_output_location() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        b.threads = 4;
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.seed = 1;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }
}
