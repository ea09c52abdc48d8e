//! Zero-shot open-vocabulary classification over embedding vectors.

mod analytics;

pub use analytics::{
    occlusion_study, random_vs_best_gap, viewpoint_sensitivity_report, write_gap_csv, write_occlusion_csv,
    write_sensitivity_csvs, ClassGap, ClassSensitivity, OcclusionLevel, OcclusionStudy, SensitivityReport,
    REPORT_SCHEMA_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::dataset::{Split, Vocabulary};
use crate::error::{Error, Result};
use crate::linalg;

/// Which part of the vocabulary a prediction ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Base,
    Novel,
    Open,
}

impl Subset {
    pub fn resolve(self, vocab: &Vocabulary) -> Vec<usize> {
        match self {
            Subset::Base => vocab.indices(Split::Base),
            Subset::Novel => vocab.indices(Split::Novel),
            Subset::Open => vocab.all_indices(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Base => "base",
            Subset::Novel => "novel",
            Subset::Open => "open",
        }
    }
}

impl From<Split> for Subset {
    fn from(s: Split) -> Self {
        match s {
            Split::Base => Subset::Base,
            Split::Novel => Subset::Novel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub subset: Subset,
    /// Vocabulary indices, aligned with `probs`.
    pub classes: Vec<usize>,
    pub probs: Vec<f64>,
}

impl ClassDistribution {
    /// Vocabulary index of the most probable class (lowest index on ties).
    pub fn argmax(&self) -> usize {
        self.classes[linalg::argmax(&self.probs)]
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Vocabulary indices of the `k` most probable classes, best first.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.probs.len()).collect();
        order.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(self.classes[a].cmp(&self.classes[b])));
        order.into_iter().take(k).map(|i| self.classes[i]).collect()
    }

    pub fn prob_of(&self, class: usize) -> Option<f64> {
        self.classes.iter().position(|&c| c == class).map(|i| self.probs[i])
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {}-dim and {}-dim vectors", a.len(), b.len())));
    }
    let (na, nb) = (linalg::norm(a), linalg::norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    Ok((linalg::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarities of `feature` to each listed vocabulary entry; zeros for a zero feature.
pub fn similarities(feature: &[f64], vocab: &Vocabulary, classes: &[usize]) -> Vec<f64> {
    let nf = linalg::norm(feature);
    if nf == 0.0 {
        return vec![0.0; classes.len()];
    }
    classes
        .iter()
        .map(|&c| {
            let e = &vocab.embeddings[c];
            (linalg::dot(feature, e) / (nf * linalg::norm(e))).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Softmax over `cos(feature, c_i) / τ` for the classes of `subset`.
pub fn predict(feature: &[f64], vocab: &Vocabulary, subset: Subset, temperature: f64) -> Result<ClassDistribution> {
    let classes = subset.resolve(vocab);
    predict_over(feature, vocab, subset, classes, temperature)
}

pub(crate) fn predict_over(
    feature: &[f64],
    vocab: &Vocabulary,
    subset: Subset,
    classes: Vec<usize>,
    temperature: f64,
) -> Result<ClassDistribution> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    if classes.is_empty() {
        return Err(Error::InvalidArgument(format!("empty {} subset", subset.as_str())));
    }
    let logits: Vec<f64> = similarities(feature, vocab, &classes).into_iter().map(|s| s / temperature).collect();
    Ok(ClassDistribution { subset, classes, probs: crate::nn::softmax(&logits) })
}

/// The `k` largest cosine similarities to the open vocabulary, descending.
/// Class identities are dropped.
pub fn concept_similarity_topk(feature: &[f64], vocab: &Vocabulary, k: usize) -> Result<Vec<f64>> {
    if k > vocab.len() {
        return Err(Error::InvalidArgument(format!("top-{k} requested from {} classes", vocab.len())));
    }
    let mut sims = similarities(feature, vocab, &vocab.all_indices());
    sims.sort_by(|a, b| b.total_cmp(a));
    sims.truncate(k);
    Ok(sims)
}

/// Cosine similarity to every base class, in vocabulary order.
pub fn base_concept_vector(feature: &[f64], vocab: &Vocabulary) -> Vec<f64> {
    similarities(feature, vocab, &vocab.indices(Split::Base))
}
