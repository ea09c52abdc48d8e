use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{build_descriptors, fusion_loss, FusionModel};
use crate::dataset::{EmbeddingGridDataset, Split, Vocabulary};
use crate::env::{run_episode, EnvConfig, EpisodeRecord, Navigator};
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{clip_grad_norm, Adam, AdamConfig, Module};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionTrainConfig {
    pub epochs: usize,
    /// Episodes per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub max_grad_norm: f64,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            max_grad_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of episodes whose full-episode fused prediction over the
    /// base classes is correct.
    pub accuracy: f64,
}

/// One optimizer step on a batch of episodes. Every prefix `1..=t` of every
/// episode contributes one cross-entropy term; the step minimizes their mean.
///
/// Uses the model's temperature. Returns the mean loss and the
/// full-episode accuracy before the step.
pub fn fusion_step(
    model: &mut FusionModel,
    adam: &mut Adam,
    episodes: &[EpisodeRecord],
    vocab: &Vocabulary,
    max_grad_norm: f64,
) -> Result<(f64, f64)> {
    let terms: usize = episodes.iter().map(|e| e.features.len()).sum();
    if terms == 0 {
        return Err(Error::InvalidArgument("fusion step on an empty batch".into()));
    }
    let base = vocab.indices(Split::Base);
    model.zero_grad();
    let mut total = 0.0;
    let mut correct = 0usize;
    for ep in episodes {
        for t in 1..=ep.features.len() {
            let feats = &ep.features[..t];
            let desc = build_descriptors(feats, &ep.proprios[..t], vocab, &model.config)?;
            let (res, cache) = model.forward(&desc, feats)?;
            let (loss, mut dg) = fusion_loss(&res.global_feature, vocab, ep.label, model.config.temperature)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("fusion loss {loss} on object {} prefix {t}", ep.object)));
            }
            total += loss;
            dg.iter_mut().for_each(|g| *g /= terms as f64);
            model.backward(&cache, &dg);
            if t == ep.features.len() {
                let sims = crate::classifier::similarities(&res.global_feature, vocab, &base);
                correct += usize::from(base[linalg::argmax(&sims)] == ep.label);
            }
        }
    }
    let mut params = model.params_mut();
    if max_grad_norm > 0.0 {
        clip_grad_norm(&mut params, max_grad_norm);
    }
    adam.step(&mut params)?;
    Ok((total / terms as f64, correct as f64 / episodes.len() as f64))
}

/// Train on episodes of the base-class `objects`, one episode per object per
/// epoch, with moves chosen by `navigator`.
pub fn train_fusion(
    model: &mut FusionModel,
    dataset: &EmbeddingGridDataset,
    objects: &[usize],
    navigator: &mut dyn Navigator,
    env: EnvConfig,
    cfg: &FusionTrainConfig,
    seed: u64,
) -> Result<Vec<FusionEpochLog>> {
    let vocab = Vocabulary::from_dataset(dataset);
    let mut pool: Vec<usize> = objects
        .iter()
        .copied()
        .filter(|&o| dataset.classes[dataset.objects[o].class_index as usize].split == Split::Base)
        .collect();
    if pool.len() < 2 {
        return Err(Error::InvalidArgument(format!("fusion training needs at least 2 base-class objects, got {}", pool.len())));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("fusion batch_size must be positive".into()));
    }
    let mut adam = Adam::new(cfg.adam);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut episode_index = 0u64;
    for epoch in 0..cfg.epochs {
        pool.shuffle(&mut rng::stream(seed, "fusion-shuffle", epoch as u64));
        let (mut loss_sum, mut acc_sum, mut weight) = (0.0, 0.0, 0.0);
        for chunk in pool.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &o in chunk {
                batch.push(run_episode(dataset, o, env, rng::derive_seed(seed, "fusion-episode", episode_index), navigator)?);
                episode_index += 1;
            }
            let (loss, acc) = fusion_step(model, &mut adam, &batch, &vocab, cfg.max_grad_norm)?;
            let w = chunk.len() as f64;
            loss_sum += loss * w;
            acc_sum += acc * w;
            weight += w;
        }
        let entry = FusionEpochLog { epoch, mean_loss: loss_sum / weight, accuracy: acc_sum / weight };
        debug!("fusion epoch {epoch}: loss {:.4} accuracy {:.3}", entry.mean_loss, entry.accuracy);
        log.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, AmbiguityProfile, SynthConfig};
    use crate::env::RandomNavigator;
    use crate::fusion::FusionConfig;

    fn world(ambiguity: AmbiguityProfile, seed: u64) -> EmbeddingGridDataset {
        generate_synthetic(&SynthConfig {
            num_base: 4,
            num_novel: 2,
            objects_per_class: 8,
            test_objects_per_class: 2,
            dim: 16,
            rows: 6,
            cols: 6,
            ambiguity,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn small_model(seed: u64) -> FusionModel {
        FusionModel::new(FusionConfig { d_model: 16, ..FusionConfig::default() }, &mut rng::from_seed(seed))
    }

    #[test]
    fn separable_world_reaches_full_accuracy() {
        let ds = world(AmbiguityProfile::Constant { value: 0.0 }, 1);
        let objects: Vec<usize> = (0..ds.objects.len()).collect();
        let mut m = small_model(1);
        let log = train_fusion(&mut m, &ds, &objects, &mut RandomNavigator, EnvConfig::default(), &FusionTrainConfig::default(), 3)
            .unwrap();
        assert!(log.len() <= 5);
        assert!(log.last().unwrap().accuracy >= 0.99, "{log:?}");
    }

    #[test]
    fn training_lowers_the_loss() {
        for seed in 0..10 {
            let ds = world(AmbiguityProfile::default(), seed);
            let objects: Vec<usize> = (0..ds.objects.len()).collect();
            let vocab = Vocabulary::from_dataset(&ds);
            let eps: Vec<EpisodeRecord> = objects
                .iter()
                .filter(|&&o| ds.classes[ds.objects[o].class_index as usize].split == Split::Base)
                .map(|&o| run_episode(&ds, o, EnvConfig::default(), 1000 + o as u64, &mut RandomNavigator).unwrap())
                .collect();
            let cfg = FusionTrainConfig { epochs: 20, ..FusionTrainConfig::default() };
            let mut m = small_model(seed);
            let eval = |m: &mut FusionModel| {
                let mut probe = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() });
                fusion_step(m, &mut probe, &eps, &vocab, 0.0).unwrap().0
            };
            let before = eval(&mut m);
            train_fusion(&mut m, &ds, &objects, &mut RandomNavigator, EnvConfig::default(), &cfg, seed).unwrap();
            let after = eval(&mut m);
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = world(AmbiguityProfile::default(), 4);
        let objects: Vec<usize> = (0..ds.objects.len()).collect();
        let cfg = FusionTrainConfig { epochs: 2, ..FusionTrainConfig::default() };
        let run = || {
            let mut m = small_model(5);
            let log = train_fusion(&mut m, &ds, &objects, &mut RandomNavigator, EnvConfig::default(), &cfg, 6).unwrap();
            (m, log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_too_few_base_objects() {
        let ds = world(AmbiguityProfile::default(), 0);
        let mut m = small_model(0);
        let err = train_fusion(&mut m, &ds, &[0], &mut RandomNavigator, EnvConfig::default(), &FusionTrainConfig::default(), 0);
        assert!(err.is_err());
    }
}
