use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::base_concept_vector;
use crate::dataset::{Split, Vocabulary};
use crate::env::{NUM_ACTIONS, PROPRIO_DIM};
use crate::error::{Error, Result};
use crate::nn::{Dense, GruCache, GruCell, Module, Param};

/// What the policy's feature channel sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// A frozen random projection of the feature, so aligned class
    /// semantics reach the policy only through base-class similarities.
    #[default]
    Default,
    /// The raw feature through a trainable linear head.
    RawFeature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub projection_dim: usize,
    pub encoder_hidden: usize,
    pub gru_hidden: usize,
    pub input_mode: InputMode,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { projection_dim: 32, encoder_hidden: 64, gru_hidden: 128, input_mode: InputMode::Default }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub value: f64,
    pub h_next: Vec<f64>,
}

/// Activations of one step, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct StepCache {
    feature: Vec<f64>,
    head_out: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    gru_in: Vec<f64>,
    gru: GruCache,
    h_next: Vec<f64>,
}

/// Recurrent actor-critic: encoder MLP, GRU core, linear actor and critic.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub feature_dim: usize,
    pub num_base: usize,
    /// Frozen `[projection_dim × D]` matrix; never updated.
    pub projection: Param,
    /// Trainable replacement for the projection in [`InputMode::RawFeature`].
    pub raw_head: Option<Dense>,
    pub enc1: Dense,
    pub enc2: Dense,
    pub enc3: Dense,
    pub gru: GruCell,
    pub actor: Dense,
    pub critic: Dense,
}

impl PolicyModel {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, feature_dim: usize, num_base: usize, rng: &mut R) -> Self {
        let p = config.projection_dim;
        let e = config.encoder_hidden;
        let mut projection = Param::zeros("policy.projection", &[p, feature_dim]);
        let normal = Normal::new(0.0, 1.0 / (p as f64).sqrt()).expect("positive std");
        projection.value.iter_mut().for_each(|v| *v = normal.sample(rng));
        let raw_head = match config.input_mode {
            InputMode::Default => None,
            InputMode::RawFeature => Some(Dense::new("policy.raw_head", feature_dim, p, rng)),
        };
        Self {
            config,
            feature_dim,
            num_base,
            projection,
            raw_head,
            enc1: Dense::new("policy.enc1", p, e, rng),
            enc2: Dense::new("policy.enc2", e, e, rng),
            enc3: Dense::new("policy.enc3", e, p, rng),
            gru: GruCell::new("policy.gru", p + num_base + PROPRIO_DIM, config.gru_hidden, rng),
            actor: Dense::new("policy.actor", config.gru_hidden, NUM_ACTIONS, rng),
            critic: Dense::new("policy.critic", config.gru_hidden, 1, rng),
        }
    }

    pub fn for_vocab<R: Rng + ?Sized>(config: PolicyConfig, feature_dim: usize, vocab: &Vocabulary, rng: &mut R) -> Self {
        Self::new(config, feature_dim, vocab.indices(Split::Base).len(), rng)
    }

    pub fn input_dim(&self) -> usize {
        self.gru.in_dim()
    }

    pub fn initial_state(&self) -> Vec<f64> {
        vec![0.0; self.config.gru_hidden]
    }

    /// SHA-256 of the frozen projection, for checking it never changes.
    pub fn projection_checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.projection.value {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn head(&self, feature: &[f64]) -> Vec<f64> {
        match &self.raw_head {
            Some(d) => d.forward(feature),
            None => {
                let cols = self.feature_dim;
                (0..self.config.projection_dim)
                    .map(|r| crate::linalg::dot(&self.projection.value[r * cols..(r + 1) * cols], feature))
                    .collect()
            }
        }
    }

    /// Encoder output, base-class similarities and proprioception, concatenated.
    pub fn policy_input(&self, feature: &[f64], proprio: &[f64], vocab: &Vocabulary) -> Result<Vec<f64>> {
        Ok(self.encode(feature, proprio, vocab)?.3)
    }

    fn encode(&self, feature: &[f64], proprio: &[f64], vocab: &Vocabulary) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        if feature.len() != self.feature_dim {
            return Err(Error::Shape(format!("policy feature has {} dims, expected {}", feature.len(), self.feature_dim)));
        }
        if proprio.len() != PROPRIO_DIM {
            return Err(Error::Shape(format!("proprioception has {} dims, expected {PROPRIO_DIM}", proprio.len())));
        }
        let concepts = base_concept_vector(feature, vocab);
        if concepts.len() != self.num_base {
            return Err(Error::Shape(format!("vocabulary has {} base classes, policy expects {}", concepts.len(), self.num_base)));
        }
        let head_out = self.head(feature);
        let a1 = tanh(self.enc1.forward(&head_out));
        let a2 = tanh(self.enc2.forward(&a1));
        let a3 = tanh(self.enc3.forward(&a2));
        let mut input = a3;
        input.extend_from_slice(&concepts);
        input.extend_from_slice(proprio);
        Ok((head_out, a1, a2, input))
    }

    /// One recurrent step from a raw observation.
    pub fn step(&self, feature: &[f64], proprio: &[f64], vocab: &Vocabulary, h_prev: &[f64]) -> Result<(PolicyOutput, StepCache)> {
        let (head_out, a1, a2, gru_in) = self.encode(feature, proprio, vocab)?;
        let (h_next, gru) = self.gru.try_forward(&gru_in, h_prev)?;
        let out = PolicyOutput { logits: self.actor.forward(&h_next), value: self.critic.forward(&h_next)[0], h_next: h_next.clone() };
        Ok((out, StepCache { feature: feature.to_vec(), head_out, a1, a2, gru_in, gru, h_next }))
    }

    /// Actor, critic and recurrence from a prepared input vector.
    pub fn policy_forward(&self, input: &[f64], h_prev: &[f64]) -> Result<PolicyOutput> {
        let (h_next, _) = self.gru.try_forward(input, h_prev)?;
        Ok(PolicyOutput { logits: self.actor.forward(&h_next), value: self.critic.forward(&h_next)[0], h_next })
    }

    /// Accumulates parameter gradients for one step and returns `dL/dh_prev`.
    /// `d_h_next` is the gradient flowing back from later steps.
    pub fn backward_step(&mut self, cache: &StepCache, d_logits: &[f64], d_value: f64, d_h_next: &[f64]) -> Vec<f64> {
        let mut dh = self.actor.backward(&cache.h_next, d_logits);
        crate::linalg::axpy(1.0, &self.critic.backward(&cache.h_next, &[d_value]), &mut dh);
        crate::linalg::axpy(1.0, d_h_next, &mut dh);
        let (dx, dh_prev) = self.gru.backward(&cache.gru, &dh);

        let p = self.config.projection_dim;
        let a3 = &cache.gru_in[..p];
        let d3: Vec<f64> = dx[..p].iter().zip(a3).map(|(g, a)| g * (1.0 - a * a)).collect();
        let d2 = tanh_grad(self.enc3.backward(&cache.a2, &d3), &cache.a2);
        let d1 = tanh_grad(self.enc2.backward(&cache.a1, &d2), &cache.a1);
        let d_head = self.enc1.backward(&cache.head_out, &d1);
        if let Some(head) = self.raw_head.as_mut() {
            head.backward(&cache.feature, &d_head);
        }
        dh_prev
    }
}

fn tanh(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x = x.tanh());
    v
}

fn tanh_grad(mut upstream: Vec<f64>, activation: &[f64]) -> Vec<f64> {
    upstream.iter_mut().zip(activation).for_each(|(g, a)| *g *= 1.0 - a * a);
    upstream
}

impl Module for PolicyModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = Vec::new();
        if let Some(h) = &self.raw_head {
            p.extend(h.params());
        }
        for d in [&self.enc1, &self.enc2, &self.enc3] {
            p.extend(d.params());
        }
        p.extend(self.gru.params());
        p.extend(self.actor.params());
        p.extend(self.critic.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        if let Some(h) = self.raw_head.as_mut() {
            p.extend(h.params_mut());
        }
        p.extend(self.enc1.params_mut());
        p.extend(self.enc2.params_mut());
        p.extend(self.enc3.params_mut());
        p.extend(self.gru.params_mut());
        p.extend(self.actor.params_mut());
        p.extend(self.critic.params_mut());
        p
    }

    fn frozen(&self) -> Vec<&Param> {
        vec![&self.projection]
    }

    fn frozen_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.projection]
    }
}
