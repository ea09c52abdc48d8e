use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{predict, ClassDistribution, Subset};
use crate::dataset::{EmbeddingGridDataset, Split, Vocabulary};
use crate::env::{run_episode, EnvConfig, EpisodeRecord, LargestStepNavigator, Navigator, RandomNavigator};
use crate::error::{Error, Result};
use crate::fusion::{fuse_baseline, BaselineStrategy, FusionModel};
use crate::policy::{PolicyModel, PolicyNavigator};
use crate::rng;

pub const EVAL_SCHEMA_VERSION: u32 = 1;

/// Who chooses the moves during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Agent<'a> {
    Random,
    LargestStep,
    Policy { model: &'a PolicyModel, greedy: bool },
}

impl Agent<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Agent::Random => "random",
            Agent::LargestStep => "largest_step",
            Agent::Policy { .. } => "policy",
        }
    }
}

/// How the frames seen so far become a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Predictor {
    Attention,
    /// Newest frame only.
    LastFrame,
    Baseline(BaselineStrategy),
}

impl Predictor {
    pub const ALL: [Predictor; 6] = [
        Predictor::Attention,
        Predictor::LastFrame,
        Predictor::Baseline(BaselineStrategy::AverageFeature),
        Predictor::Baseline(BaselineStrategy::AveragePrediction),
        Predictor::Baseline(BaselineStrategy::MaxPrediction),
        Predictor::Baseline(BaselineStrategy::Vote),
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Attention => "attention",
            Predictor::LastFrame => "last_frame",
            Predictor::Baseline(s) => s.as_str(),
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn predict(&self, record: &EpisodeRecord, t: usize, fusion: &FusionModel, vocab: &Vocabulary) -> Result<ClassDistribution> {
        let tau = fusion.config.temperature;
        let frames = &record.features[..t];
        match self {
            Predictor::Attention => {
                let fused = fusion.fuse_prefix(frames, &record.proprios[..t], vocab)?;
                predict(&fused.global_feature, vocab, Subset::Open, tau)
            }
            Predictor::LastFrame => predict(&frames[t - 1], vocab, Subset::Open, tau),
            Predictor::Baseline(s) => fuse_baseline(*s, frames, vocab, Subset::Open, tau),
        }
    }
}

impl From<Predictor> for String {
    fn from(p: Predictor) -> Self {
        p.name().to_string()
    }
}

impl TryFrom<String> for Predictor {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        Predictor::from_name(&s).ok_or_else(|| format!("unknown predictor `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCurve {
    pub split: Subset,
    pub episodes: usize,
    /// Success rate after observation `t`, for `t = 1..=T`.
    pub top1: Vec<f64>,
    pub top3: Vec<f64>,
}

impl SplitCurve {
    pub fn final_top1(&self) -> f64 {
        self.top1.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub predictor: String,
    pub splits: Vec<SplitCurve>,
}

impl PredictorReport {
    pub fn split(&self, s: Subset) -> &SplitCurve {
        self.splits.iter().find(|c| c.split == s).expect("every report has all three splits")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub agent: String,
    pub seed: u64,
    pub horizon: usize,
    pub episodes: usize,
    pub config_fingerprint: String,
    /// All agents are scored with the same fusion checkpoint.
    pub shared_fusion: bool,
    pub predictors: Vec<PredictorReport>,
}

impl EvaluationReport {
    pub fn predictor(&self, p: Predictor) -> Option<&PredictorReport> {
        self.predictors.iter().find(|r| r.predictor == p.name())
    }

    pub fn final_top1(&self, p: Predictor, s: Subset) -> Option<f64> {
        self.predictor(p).map(|r| r.split(s).final_top1())
    }

    /// Long-format CSV: agent, predictor, split, step, episodes, top1, top3.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["agent", "predictor", "split", "step", "episodes", "top1", "top3"])?;
        for p in &self.predictors {
            for c in &p.splits {
                for (t, (a, b)) in c.top1.iter().zip(&c.top3).enumerate() {
                    w.write_record([
                        self.agent.clone(),
                        p.predictor.clone(),
                        c.split.as_str().to_string(),
                        (t + 1).to_string(),
                        c.episodes.to_string(),
                        format!("{a:.6}"),
                        format!("{b:.6}"),
                    ])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json_path, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    pub env: EnvConfig,
    /// Episodes per object, each from its own start.
    pub repeats: usize,
    pub predictors: Vec<Predictor>,
    pub seed: u64,
    pub config_fingerprint: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { env: EnvConfig::default(), repeats: 1, predictors: Predictor::ALL.to_vec(), seed: 0, config_fingerprint: String::new() }
    }
}

fn navigator<'a>(agent: Agent<'a>, vocab: &'a Vocabulary) -> Box<dyn Navigator + 'a> {
    match agent {
        Agent::Random => Box::new(RandomNavigator),
        Agent::LargestStep => Box::new(LargestStepNavigator),
        Agent::Policy { model, greedy } => Box::new(PolicyNavigator::new(model, vocab, greedy)),
    }
}

/// Episode `i` of an evaluation: the object and its seed. Agents evaluated
/// with the same options see identical starts and occlusion.
pub fn evaluation_episodes(objects: &[usize], opts: &EvalOptions) -> Vec<(usize, u64)> {
    (0..opts.repeats)
        .flat_map(|r| objects.iter().map(move |&o| (r, o)))
        .enumerate()
        .map(|(i, (_, o))| (o, rng::derive_seed(opts.seed, "eval", i as u64)))
        .collect()
}

/// Run the agent on every object and score every predictor at every step.
pub fn evaluate(
    dataset: &EmbeddingGridDataset,
    objects: &[usize],
    agent: Agent<'_>,
    fusion: &FusionModel,
    vocab: &Vocabulary,
    opts: &EvalOptions,
) -> Result<EvaluationReport> {
    if objects.is_empty() {
        return Err(Error::InvalidArgument("evaluation over an empty object list".into()));
    }
    let horizon = opts.env.horizon;
    let np = opts.predictors.len();
    // per episode: split, then [predictor][step] = (top1 hit, top3 hit)
    let scored = evaluation_episodes(objects, opts)
        .into_par_iter()
        .map(|(object, seed)| {
            let mut nav = navigator(agent, vocab);
            let record = run_episode(dataset, object, opts.env, seed, nav.as_mut())?;
            let split = dataset.classes[record.label].split;
            let mut hits = vec![vec![(false, false); horizon]; np];
            for (pi, p) in opts.predictors.iter().enumerate() {
                for t in 1..=horizon {
                    let dist = p.predict(&record, t, fusion, vocab)?;
                    let top3 = dist.top_k(3);
                    hits[pi][t - 1] = (top3.first() == Some(&record.label), top3.contains(&record.label));
                }
            }
            Ok((split, hits))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut predictors = Vec::with_capacity(np);
    for (pi, p) in opts.predictors.iter().enumerate() {
        let mut splits = Vec::with_capacity(3);
        for subset in [Subset::Base, Subset::Novel, Subset::Open] {
            let rows: Vec<&Vec<(bool, bool)>> = scored
                .iter()
                .filter(|(s, _)| match subset {
                    Subset::Base => *s == Split::Base,
                    Subset::Novel => *s == Split::Novel,
                    Subset::Open => true,
                })
                .map(|(_, h)| &h[pi])
                .collect();
            let n = rows.len();
            let rate = |f: fn(&(bool, bool)) -> bool| -> Vec<f64> {
                (0..horizon)
                    .map(|t| if n == 0 { 0.0 } else { rows.iter().filter(|r| f(&r[t])).count() as f64 / n as f64 })
                    .collect()
            };
            splits.push(SplitCurve { split: subset, episodes: n, top1: rate(|h| h.0), top3: rate(|h| h.1) });
        }
        predictors.push(PredictorReport { predictor: p.name().to_string(), splits });
    }
    Ok(EvaluationReport {
        schema_version: EVAL_SCHEMA_VERSION,
        agent: agent.name().to_string(),
        seed: opts.seed,
        horizon,
        episodes: scored.len(),
        config_fingerprint: opts.config_fingerprint.clone(),
        shared_fusion: true,
        predictors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, AmbiguityProfile, SynthConfig};
    use crate::fusion::FusionConfig;
    use crate::policy::PolicyConfig;

    fn world(ambiguity: AmbiguityProfile) -> EmbeddingGridDataset {
        generate_synthetic(&SynthConfig {
            num_base: 3,
            num_novel: 3,
            objects_per_class: 4,
            test_objects_per_class: 2,
            dim: 16,
            rows: 6,
            cols: 6,
            ambiguity,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn models(ds: &EmbeddingGridDataset, v: &Vocabulary) -> (FusionModel, PolicyModel) {
        let mut r = rng::from_seed(1);
        (
            FusionModel::new(FusionConfig { d_model: 8, ..FusionConfig::default() }, &mut r),
            PolicyModel::for_vocab(PolicyConfig::default(), ds.dim, v, &mut r),
        )
    }

    #[test]
    fn separable_world_is_solved_at_every_step() {
        let ds = world(AmbiguityProfile::Constant { value: 0.0 });
        let v = Vocabulary::from_dataset(&ds);
        let (f, p) = models(&ds, &v);
        let objects: Vec<usize> = (0..ds.objects.len()).collect();
        for agent in [Agent::Random, Agent::LargestStep, Agent::Policy { model: &p, greedy: true }] {
            let r = evaluate(&ds, &objects, agent, &f, &v, &EvalOptions::default()).unwrap();
            for pr in &r.predictors {
                for c in &pr.splits {
                    assert!(c.top1.iter().all(|&x| x == 1.0), "{} {}", r.agent, pr.predictor);
                }
            }
        }
    }

    #[test]
    fn report_identities() {
        let ds = world(AmbiguityProfile::default());
        let v = Vocabulary::from_dataset(&ds);
        let (f, p) = models(&ds, &v);
        let objects: Vec<usize> = (0..ds.objects.len()).collect();
        let opts = EvalOptions { repeats: 2, ..EvalOptions::default() };
        let r = evaluate(&ds, &objects, Agent::Policy { model: &p, greedy: false }, &f, &v, &opts).unwrap();
        assert_eq!(r.episodes, 2 * objects.len());
        for pr in &r.predictors {
            let (b, n, o) = (pr.split(Subset::Base), pr.split(Subset::Novel), pr.split(Subset::Open));
            assert_eq!(o.episodes, b.episodes + n.episodes);
            for t in 0..6 {
                for c in [b, n, o] {
                    assert!(c.top3[t] >= c.top1[t]);
                    assert!((0.0..=1.0).contains(&c.top1[t]));
                }
                let weighted = (b.top1[t] * b.episodes as f64 + n.top1[t] * n.episodes as f64) / o.episodes as f64;
                assert!((weighted - o.top1[t]).abs() < 1e-12);
            }
        }
        let att = r.predictor(Predictor::Attention).unwrap();
        let last = r.predictor(Predictor::LastFrame).unwrap();
        for s in [Subset::Base, Subset::Novel, Subset::Open] {
            assert_eq!(att.split(s).top1[0], last.split(s).top1[0]);
        }
    }

    #[test]
    fn agents_share_starts_but_not_reports() {
        let ds = world(AmbiguityProfile::default());
        let v = Vocabulary::from_dataset(&ds);
        let (f, p) = models(&ds, &v);
        let objects: Vec<usize> = (0..ds.objects.len()).collect();
        let opts = EvalOptions { predictors: vec![Predictor::Attention], repeats: 3, ..EvalOptions::default() };
        let reports: Vec<EvaluationReport> = [Agent::Random, Agent::LargestStep, Agent::Policy { model: &p, greedy: true }]
            .into_iter()
            .map(|a| evaluate(&ds, &objects, a, &f, &v, &opts).unwrap())
            .collect();
        let first_step = |r: &EvaluationReport| r.predictors[0].split(Subset::Open).top1[0];
        assert!(reports.iter().all(|r| first_step(r) == first_step(&reports[0])));
        assert_ne!(reports[0].to_csv().unwrap(), reports[1].to_csv().unwrap());
        assert_eq!(reports[2], evaluate(&ds, &objects, Agent::Policy { model: &p, greedy: true }, &f, &v, &opts).unwrap());
    }

    #[test]
    fn predictor_names_round_trip() {
        for p in Predictor::ALL {
            assert_eq!(Predictor::from_name(p.name()), Some(p));
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(serde_json::from_str::<Predictor>(&json).unwrap(), p);
        }
        assert!(serde_json::from_str::<Predictor>("\"median\"").is_err());
    }

    #[test]
    fn empty_object_list_is_an_error() {
        let ds = world(AmbiguityProfile::default());
        let v = Vocabulary::from_dataset(&ds);
        let (f, _) = models(&ds, &v);
        assert!(evaluate(&ds, &[], Agent::Random, &f, &v, &EvalOptions::default()).is_err());
    }
}
