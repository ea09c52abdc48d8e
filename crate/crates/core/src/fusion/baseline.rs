use serde::{Deserialize, Serialize};

use crate::classifier::{predict, ClassDistribution, Subset};
use crate::dataset::Vocabulary;
use crate::error::{Error, Result};
use crate::linalg;

/// Non-learned ways of combining several frames into one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineStrategy {
    AverageFeature,
    AveragePrediction,
    MaxPrediction,
    Vote,
}

impl BaselineStrategy {
    pub const ALL: [BaselineStrategy; 4] = [
        BaselineStrategy::AverageFeature,
        BaselineStrategy::AveragePrediction,
        BaselineStrategy::MaxPrediction,
        BaselineStrategy::Vote,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineStrategy::AverageFeature => "average_feature",
            BaselineStrategy::AveragePrediction => "average_prediction",
            BaselineStrategy::MaxPrediction => "max_prediction",
            BaselineStrategy::Vote => "vote",
        }
    }
}

/// Combine `features` with `strategy`. Vote returns the share of frames
/// voting for each class, so its argmax is the majority with ties going to
/// the lowest class index.
pub fn fuse_baseline(
    strategy: BaselineStrategy,
    features: &[Vec<f64>],
    vocab: &Vocabulary,
    subset: Subset,
    temperature: f64,
) -> Result<ClassDistribution> {
    let first = features.first().ok_or_else(|| Error::InvalidArgument("baseline fusion of zero frames".into()))?;
    if strategy == BaselineStrategy::AverageFeature {
        let mut mean = vec![0.0; first.len()];
        for f in features {
            linalg::axpy(1.0 / features.len() as f64, f, &mut mean);
        }
        return predict(&mean, vocab, subset, temperature);
    }
    let per_frame = features.iter().map(|f| predict(f, vocab, subset, temperature)).collect::<Result<Vec<_>>>()?;
    let mut out = per_frame[0].clone();
    match strategy {
        BaselineStrategy::AverageFeature => unreachable!(),
        BaselineStrategy::AveragePrediction => {
            out.probs = vec![0.0; out.classes.len()];
            for d in &per_frame {
                linalg::axpy(1.0, &d.probs, &mut out.probs);
            }
            let total: f64 = out.probs.iter().sum();
            out.probs.iter_mut().for_each(|p| *p /= total);
        }
        BaselineStrategy::MaxPrediction => {
            let best = linalg::argmax(&per_frame.iter().map(|d| d.max_prob()).collect::<Vec<_>>());
            out = per_frame[best].clone();
        }
        BaselineStrategy::Vote => {
            out.probs = vec![0.0; out.classes.len()];
            for d in &per_frame {
                out.probs[linalg::argmax(&d.probs)] += 1.0 / per_frame.len() as f64;
            }
        }
    }
    Ok(out)
}
