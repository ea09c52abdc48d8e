//! Attention-weighted evidence fusion.
//!
//! Each observed frame gets a class-anonymous descriptor (top-k concept
//! similarities, similarities to the other frames, proprioception). A
//! single-head self-attention layer and a linear scorer turn descriptors
//! into one logit per frame; the softmax over observed frames gives weights
//! `α`, and the global feature is `Σ α_t f_t`.

mod baseline;
mod train;

pub use baseline::{fuse_baseline, BaselineStrategy};
pub use train::{fusion_step, train_fusion, FusionEpochLog, FusionTrainConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{concept_similarity_topk, similarities, Subset};
use crate::dataset::{Split, Vocabulary};
use crate::env::PROPRIO_DIM;
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{masked_softmax, softmax_cross_entropy, AttentionCache, Dense, Module, Param, SelfAttention};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Number of concept similarities kept per frame.
    pub top_k: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub temperature: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { top_k: 5, horizon: 6, d_model: 64, temperature: 1.0 }
    }
}

impl FusionConfig {
    pub fn descriptor_dim(&self) -> usize {
        self.top_k + self.horizon.saturating_sub(1) + PROPRIO_DIM
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDescriptor {
    pub s_concept: Vec<f64>,
    pub s_frame: Vec<f64>,
    pub proprio: Vec<f64>,
    pub observed: bool,
}

impl StepDescriptor {
    pub fn padding(cfg: &FusionConfig) -> Self {
        Self {
            s_concept: vec![0.0; cfg.top_k],
            s_frame: vec![0.0; cfg.horizon.saturating_sub(1)],
            proprio: vec![0.0; PROPRIO_DIM],
            observed: false,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.s_concept.len() + self.s_frame.len() + self.proprio.len());
        v.extend_from_slice(&self.s_concept);
        v.extend_from_slice(&self.s_frame);
        v.extend_from_slice(&self.proprio);
        v
    }
}

fn frame_slot(own: usize, other: usize) -> usize {
    if other < own {
        other
    } else {
        other - 1
    }
}

/// Descriptor for the newest frame `f_t` given the frames before it.
///
/// Slot `j` of `s_frame` holds the cosine to frame `j` (own slot skipped);
/// slots of frames not yet observed stay 0.
pub fn build_descriptor(
    feature: &[f64],
    history: &[Vec<f64>],
    vocab: &Vocabulary,
    top_k: usize,
    proprio: &[f64],
    horizon: usize,
) -> Result<StepDescriptor> {
    if history.len() >= horizon {
        return Err(Error::InvalidArgument(format!("history of {} frames with horizon {horizon}", history.len())));
    }
    if let Some(h) = history.iter().find(|h| h.len() != feature.len()) {
        return Err(Error::Shape(format!("history frame has {} dims, feature has {}", h.len(), feature.len())));
    }
    if proprio.len() != PROPRIO_DIM {
        return Err(Error::Shape(format!("proprioception has {} dims, expected {PROPRIO_DIM}", proprio.len())));
    }
    let own = history.len();
    let mut s_frame = vec![0.0; horizon - 1];
    for (j, h) in history.iter().enumerate() {
        s_frame[frame_slot(own, j)] = cos_or_zero(feature, h);
    }
    Ok(StepDescriptor {
        s_concept: concept_similarity_topk(feature, vocab, top_k)?,
        s_frame,
        proprio: proprio.to_vec(),
        observed: true,
    })
}

fn cos_or_zero(a: &[f64], b: &[f64]) -> f64 {
    let d = linalg::norm(a) * linalg::norm(b);
    if d == 0.0 {
        0.0
    } else {
        (linalg::dot(a, b) / d).clamp(-1.0, 1.0)
    }
}

/// Descriptors for every observed frame of an episode prefix, padded to the
/// horizon. Each frame's `s_frame` covers all other observed frames.
pub fn build_descriptors(
    features: &[Vec<f64>],
    proprios: &[Vec<f64>],
    vocab: &Vocabulary,
    cfg: &FusionConfig,
) -> Result<Vec<StepDescriptor>> {
    let t = features.len();
    if t == 0 || t > cfg.horizon {
        return Err(Error::InvalidArgument(format!("{t} frames for horizon {}", cfg.horizon)));
    }
    if proprios.len() != t {
        return Err(Error::Shape(format!("{t} frames but {} proprioception vectors", proprios.len())));
    }
    let mut out = Vec::with_capacity(cfg.horizon);
    for i in 0..t {
        let mut s_frame = vec![0.0; cfg.horizon - 1];
        for j in (0..t).filter(|&j| j != i) {
            s_frame[frame_slot(i, j)] = cos_or_zero(&features[i], &features[j]);
        }
        if proprios[i].len() != PROPRIO_DIM {
            return Err(Error::Shape(format!("proprioception has {} dims", proprios[i].len())));
        }
        out.push(StepDescriptor {
            s_concept: concept_similarity_topk(&features[i], vocab, cfg.top_k)?,
            s_frame,
            proprio: proprios[i].clone(),
            observed: true,
        });
    }
    out.resize_with(cfg.horizon, || StepDescriptor::padding(cfg));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedResult {
    /// One weight per descriptor slot; exactly 0 on unobserved slots.
    pub alpha: Vec<f64>,
    pub global_feature: Vec<f64>,
}

/// Intermediate values needed to backpropagate through [`FusionModel::forward`].
#[derive(Debug, Clone)]
pub struct FusionCache {
    observed: Vec<usize>,
    attn: AttentionCache,
    embedded: Vec<Vec<f64>>,
    alpha_obs: Vec<f64>,
    features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub attention: SelfAttention,
    pub scorer: Dense,
}

impl FusionModel {
    pub fn new<R: Rng + ?Sized>(config: FusionConfig, rng: &mut R) -> Self {
        let q = config.descriptor_dim();
        Self {
            config,
            attention: SelfAttention::new("fusion.attn", q, config.d_model, rng),
            scorer: Dense::new("fusion.scorer", config.d_model, 1, rng),
        }
    }

    pub fn forward(&self, descriptors: &[StepDescriptor], features: &[Vec<f64>]) -> Result<(FusedResult, FusionCache)> {
        let observed: Vec<usize> = descriptors.iter().enumerate().filter(|(_, d)| d.observed).map(|(i, _)| i).collect();
        if observed.is_empty() {
            return Err(Error::InvalidArgument("fusion needs at least one observed frame".into()));
        }
        if let Some(&i) = observed.iter().find(|&&i| i >= features.len()) {
            return Err(Error::Shape(format!("descriptor {i} is observed but has no feature")));
        }
        let rows: Vec<Vec<f64>> = observed.iter().map(|&i| descriptors[i].to_vec()).collect();
        let mask = vec![true; rows.len()];
        let (embedded, attn) = self.attention.forward(&rows, &mask)?;
        let logits: Vec<f64> = embedded.iter().map(|e| self.scorer.forward(e)[0]).collect();
        let alpha_obs = masked_softmax(&logits, &mask);

        let dim = features[observed[0]].len();
        let mut global = vec![0.0; dim];
        let mut alpha = vec![0.0; descriptors.len()];
        for (k, &i) in observed.iter().enumerate() {
            alpha[i] = alpha_obs[k];
            linalg::axpy(alpha_obs[k], &features[i], &mut global);
        }
        if observed.len() == 1 {
            // softmax over one logit is exactly 1; keep the feature bit-exact
            global = features[observed[0]].clone();
        }
        let cache = FusionCache {
            features: observed.iter().map(|&i| features[i].clone()).collect(),
            observed,
            attn,
            embedded,
            alpha_obs,
        };
        Ok((FusedResult { alpha, global_feature: global }, cache))
    }

    /// Accumulates parameter gradients for upstream `d_global`.
    pub fn backward(&mut self, cache: &FusionCache, d_global: &[f64]) {
        let a = &cache.alpha_obs;
        let d_alpha: Vec<f64> = cache.features.iter().map(|f| linalg::dot(d_global, f)).collect();
        let weighted: f64 = a.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        let d_embedded: Vec<Vec<f64>> = cache
            .embedded
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let d_logit = a[k] * (d_alpha[k] - weighted);
                self.scorer.backward(e, &[d_logit])
            })
            .collect();
        self.attention.backward(&cache.attn, &d_embedded);
        debug_assert_eq!(cache.observed.len(), d_embedded.len());
    }

    /// Fuse the first `t` frames of an episode.
    pub fn fuse_prefix(&self, features: &[Vec<f64>], proprios: &[Vec<f64>], vocab: &Vocabulary) -> Result<FusedResult> {
        let desc = build_descriptors(features, proprios, vocab, &self.config)?;
        Ok(self.forward(&desc, features)?.0)
    }
}

impl Module for FusionModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.attention.params();
        p.extend(self.scorer.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.attention.params_mut();
        p.extend(self.scorer.params_mut());
        p
    }
}

/// Cross-entropy of the softmax over base-class cosine similarities of the
/// global feature. Returns the loss and its gradient with respect to it.
pub fn fusion_loss(global: &[f64], vocab: &Vocabulary, label: usize, temperature: f64) -> Result<(f64, Vec<f64>)> {
    let base = vocab.indices(Split::Base);
    let pos = base
        .iter()
        .position(|&c| c == label)
        .ok_or_else(|| Error::InvalidArgument(format!("label {label} is not a base class")))?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let g_norm = linalg::norm(global);
    if g_norm == 0.0 {
        return Err(Error::InvalidArgument("global feature is the zero vector".into()));
    }
    let sims = similarities(global, vocab, &base);
    let logits: Vec<f64> = sims.iter().map(|s| s / temperature).collect();
    let (loss, d_logits) = softmax_cross_entropy(&logits, pos)?;
    // d cos(g, c) / dg = c / (|g||c|) − cos · g / |g|²
    let mut d_global = vec![0.0; global.len()];
    for ((&c, &s), &dl) in base.iter().zip(&sims).zip(&d_logits) {
        let e = &vocab.embeddings[c];
        let scale = dl / temperature;
        linalg::axpy(scale / (g_norm * linalg::norm(e)), e, &mut d_global);
        linalg::axpy(-scale * s / (g_norm * g_norm), global, &mut d_global);
    }
    Ok((loss, d_global))
}

/// Open-vocabulary prediction from a fused feature.
pub fn predict_fused(result: &FusedResult, vocab: &Vocabulary, subset: Subset, temperature: f64) -> Result<crate::classifier::ClassDistribution> {
    crate::classifier::predict(&result.global_feature, vocab, subset, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{action_proprio, null_proprio, GridAction};
    use crate::nn::finite_diff_check;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit(dim: usize, r: &mut crate::rng::Rng) -> Vec<f64> {
        let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
        linalg::normalized(&g).unwrap()
    }

    fn random_vocab(n_base: usize, n_novel: usize, dim: usize, r: &mut crate::rng::Rng) -> Vocabulary {
        let n = n_base + n_novel;
        Vocabulary {
            names: (0..n).map(|i| format!("c{i}")).collect(),
            splits: (0..n).map(|i| if i < n_base { Split::Base } else { Split::Novel }).collect(),
            embeddings: (0..n).map(|_| unit(dim, r)).collect(),
        }
    }

    fn proprios(t: usize) -> Vec<Vec<f64>> {
        (0..t).map(|i| if i == 0 { null_proprio() } else { action_proprio(GridAction::from_index((i * 7) % 25)) }).collect()
    }

    #[test]
    fn descriptor_examples() {
        let mut r = rng::from_seed(1);
        let v = random_vocab(4, 3, 8, &mut r);
        let f = unit(8, &mut r);
        let d = build_descriptor(&f, &[], &v, 5, &null_proprio(), 6).unwrap();
        assert_eq!(d.s_frame, vec![0.0; 5]);
        assert_eq!(d.s_concept.len(), 5);

        let g = unit(8, &mut r);
        let d = build_descriptor(&f, &[g.clone(), f.clone()], &v, 5, &null_proprio(), 6).unwrap();
        assert!((d.s_frame[1] - 1.0).abs() < 1e-12);
        assert_eq!(&d.s_frame[2..], &[0.0, 0.0, 0.0]);
        assert!(build_descriptor(&f, &vec![g; 6], &v, 5, &null_proprio(), 6).is_err());
    }

    #[test]
    fn prefix_descriptors_match_pairwise_oracle() {
        let mut r = rng::from_seed(2);
        let v = random_vocab(4, 3, 8, &mut r);
        let frames: Vec<Vec<f64>> = (0..3).map(|_| unit(8, &mut r)).collect();
        let cfg = FusionConfig::default();
        let desc = build_descriptors(&frames, &proprios(3), &v, &cfg).unwrap();
        assert_eq!(desc.len(), 6);
        for i in 0..3 {
            let mut expected = vec![0.0; 5];
            let mut slot = 0;
            for j in 0..6 {
                if j == i {
                    continue;
                }
                if j < 3 {
                    let c = linalg::dot(&frames[i], &frames[j]) / (linalg::norm(&frames[i]) * linalg::norm(&frames[j]));
                    expected[slot] = c;
                }
                slot += 1;
            }
            for (a, b) in desc[i].s_frame.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // the newest frame's descriptor agrees with the incremental builder
        let inc = build_descriptor(&frames[2], &frames[..2], &v, 5, &proprios(3)[2], 6).unwrap();
        assert_eq!(inc, desc[2]);
        assert!(desc[3..].iter().all(|d| !d.observed && d.to_vec().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn single_frame_fusion_is_identity() {
        let mut r = rng::from_seed(3);
        let v = random_vocab(4, 3, 8, &mut r);
        let m = FusionModel::new(FusionConfig::default(), &mut r);
        let f = vec![unit(8, &mut r)];
        let res = m.fuse_prefix(&f, &proprios(1), &v).unwrap();
        assert_eq!(res.alpha, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(res.global_feature, f[0]);
    }

    #[test]
    fn zero_scorer_gives_mean_feature() {
        let mut r = rng::from_seed(4);
        let v = random_vocab(4, 3, 8, &mut r);
        let mut m = FusionModel::new(FusionConfig::default(), &mut r);
        m.scorer.w.value.iter_mut().for_each(|w| *w = 0.0);
        let f: Vec<Vec<f64>> = (0..4).map(|_| unit(8, &mut r)).collect();
        let res = m.fuse_prefix(&f, &proprios(4), &v).unwrap();
        for a in &res.alpha[..4] {
            assert!((a - 0.25).abs() < 1e-15);
        }
        for d in 0..8 {
            let mean = f.iter().map(|x| x[d]).sum::<f64>() / 4.0;
            assert!((res.global_feature[d] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_frames_get_equal_weight() {
        for seed in 0..10 {
            let mut r = rng::from_seed(50 + seed);
            let v = random_vocab(4, 3, 8, &mut r);
            let m = FusionModel::new(FusionConfig::default(), &mut r);
            let f = unit(8, &mut r);
            let g = unit(8, &mut r);
            // two copies of f followed by g: frames 0 and 1 have identical descriptors
            let frames = vec![f.clone(), f, g];
            let p = vec![null_proprio(), null_proprio(), action_proprio(GridAction::from_index(3))];
            let desc = build_descriptors(&frames, &p, &v, &m.config).unwrap();
            assert_eq!(desc[0], desc[1]);
            let res = m.forward(&desc, &frames).unwrap().0;
            assert!((res.alpha[0] - res.alpha[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_observed_frames_is_an_error() {
        let mut r = rng::from_seed(6);
        let m = FusionModel::new(FusionConfig::default(), &mut r);
        let pad = vec![StepDescriptor::padding(&m.config); 6];
        assert!(m.forward(&pad, &[]).is_err());
    }

    #[test]
    fn loss_reference_values() {
        let v = Vocabulary {
            names: vec!["a".into(), "b".into(), "c".into()],
            splits: vec![Split::Base, Split::Base, Split::Novel],
            embeddings: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        };
        let (l, _) = fusion_loss(&[1.0, 0.0, 0.0], &v, 0, 1.0).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.3133).abs() < 1e-4);
        assert!(fusion_loss(&[1.0, 0.0, 0.0], &v, 2, 1.0).is_err());

        let ten = Vocabulary {
            names: (0..10).map(|i| i.to_string()).collect(),
            splits: vec![Split::Base; 10],
            embeddings: (0..10).map(|i| { let mut e = vec![0.0; 11]; e[i] = 1.0; e }).collect(),
        };
        let mut g = vec![0.0; 11];
        g[10] = 1.0;
        let (l, _) = fusion_loss(&g, &ten, 3, 1.0).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut r = rng::from_seed(100 + seed);
            let v = random_vocab(4, 3, 8, &mut r);
            let cfg = FusionConfig { d_model: 8, ..FusionConfig::default() };
            let mut m = FusionModel::new(cfg, &mut r);
            let t = 2 + (seed as usize % 4);
            let frames: Vec<Vec<f64>> = (0..t).map(|_| unit(8, &mut r)).collect();
            let desc = build_descriptors(&frames, &proprios(t), &v, &cfg).unwrap();
            let label = (seed as usize) % 4;
            let report = finite_diff_check(&mut m, 1e-5, |m| {
                let (res, cache) = m.forward(&desc, &frames).unwrap();
                let (loss, dg) = fusion_loss(&res.global_feature, &v, label, 1.0).unwrap();
                m.backward(&cache, &dg);
                loss
            });
            assert!(report.max_rel_error <= 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn permuting_novel_vocabulary_leaves_alpha_unchanged() {
        let mut r = rng::from_seed(8);
        let v = random_vocab(3, 4, 8, &mut r);
        let m = FusionModel::new(FusionConfig::default(), &mut r);
        let frames: Vec<Vec<f64>> = (0..4).map(|_| unit(8, &mut r)).collect();
        let a = m.fuse_prefix(&frames, &proprios(4), &v).unwrap();
        let mut permuted = v.clone();
        permuted.embeddings[3..].rotate_left(1);
        permuted.names[3..].rotate_left(1);
        let b = m.fuse_prefix(&frames, &proprios(4), &permuted).unwrap();
        assert_eq!(a.alpha, b.alpha);
    }

    proptest::proptest! {
        #[test]
        fn alpha_is_a_distribution_and_global_is_convex(seed in 0u64..500, t in 1usize..=6) {
            let mut r = rng::from_seed(seed);
            let v = random_vocab(4, 3, 8, &mut r);
            let m = FusionModel::new(FusionConfig::default(), &mut r);
            let frames: Vec<Vec<f64>> = (0..t).map(|_| unit(8, &mut r)).collect();
            let res = m.fuse_prefix(&frames, &proprios(t), &v).unwrap();
            proptest::prop_assert!((res.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            proptest::prop_assert!(res.alpha[..t].iter().all(|&a| a >= 0.0));
            proptest::prop_assert!(res.alpha[t..].iter().all(|&a| a == 0.0));
            for d in 0..8 {
                let lo = frames.iter().map(|f| f[d]).fold(f64::INFINITY, f64::min);
                let hi = frames.iter().map(|f| f[d]).fold(f64::NEG_INFINITY, f64::max);
                proptest::prop_assert!(res.global_feature[d] >= lo - 1e-12 && res.global_feature[d] <= hi + 1e-12);
            }
        }
    }
}
