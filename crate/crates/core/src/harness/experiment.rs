use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{evaluate, evaluation_episodes, Agent, AgentKind, EvalOptions, EvaluationReport, ExperimentConfig, Predictor};
use crate::classifier::{
    occlusion_study, random_vs_best_gap, viewpoint_sensitivity_report, write_gap_csv, write_occlusion_csv,
    write_sensitivity_csvs, Subset,
};
use crate::dataset::{generate_synthetic, load_container, read_container, write_container, EmbeddingGridDataset, Split, Vocabulary};
use crate::env::{run_episode, LargestStepNavigator, Navigator, RandomNavigator};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModel};
use crate::nn::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::policy::{train_agent, PolicyConfig, PolicyModel, PolicyNavigator, TrainedAgent};

pub const DATASET_FILE: &str = "dataset.aovr";
pub const FUSION_CHECKPOINT: &str = "checkpoints/fusion.ckpt";
pub const POLICY_CHECKPOINT: &str = "checkpoints/policy.ckpt";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Train, validation and test objects. Test objects are the last
/// `test_per_class` objects of every class; validation objects the last
/// `validation_per_class` of the remaining ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSplits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_objects(ds: &EmbeddingGridDataset, test_per_class: usize, validation_per_class: usize) -> ObjectSplits {
    let mut s = ObjectSplits { train: Vec::new(), validation: Vec::new(), test: Vec::new() };
    for c in 0..ds.classes.len() {
        let objs = ds.objects_of_class(c);
        let n_test = test_per_class.min(objs.len());
        let rest = objs.len() - n_test;
        let n_val = validation_per_class.min(rest.saturating_sub(1));
        s.train.extend_from_slice(&objs[..rest - n_val]);
        s.validation.extend_from_slice(&objs[rest - n_val..rest]);
        s.test.extend_from_slice(&objs[rest..]);
    }
    s
}

/// Test objects per class recorded by the generator, else the configured value.
pub fn test_objects_per_class(ds: &EmbeddingGridDataset, cfg: &ExperimentConfig) -> usize {
    ds.metadata.get("test_objects_per_class").and_then(|v| v.parse().ok()).unwrap_or(cfg.dataset.test_objects_per_class)
}

pub fn dataset_splits(ds: &EmbeddingGridDataset, cfg: &ExperimentConfig) -> ObjectSplits {
    split_objects(ds, test_objects_per_class(ds, cfg), cfg.dataset.validation_objects_per_class)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub source: String,
    pub sha256: String,
    pub dim: usize,
    pub rows: usize,
    pub cols: usize,
    pub base_classes: usize,
    pub novel_classes: usize,
    pub objects: usize,
    pub splits: ObjectSplits,
}

/// Resolve the dataset: the configured container, else one already in the
/// output directory, else a freshly generated synthetic world.
pub fn resolve_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<(EmbeddingGridDataset, String)> {
    let load = || -> Result<(EmbeddingGridDataset, String)> {
        if let Some(p) = &cfg.dataset.path {
            return Ok((load_container(p)?, p.display().to_string()));
        }
        let local = out.join(DATASET_FILE);
        if local.exists() {
            return Ok((load_container(&local)?, local.display().to_string()));
        }
        Ok((generate_synthetic(&cfg.synth)?, "synthetic".to_string()))
    };
    load().map_err(|e| e.in_stage("ingest"))
}

/// Write the dataset and its summary into the output directory.
pub fn stage_ingest(ds: &EmbeddingGridDataset, source: &str, cfg: &ExperimentConfig, out: &Path) -> Result<DatasetSummary> {
    let run = || -> Result<DatasetSummary> {
        let bytes = write_container(ds)?;
        let path = out.join(DATASET_FILE);
        let existing = std::fs::read(&path).ok();
        if existing.as_deref() != Some(bytes.as_slice()) {
            write_file(&path, &bytes)?;
        }
        let summary = DatasetSummary {
            source: source.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            dim: ds.dim,
            rows: ds.rows,
            cols: ds.cols,
            base_classes: ds.class_indices(Split::Base).len(),
            novel_classes: ds.class_indices(Split::Novel).len(),
            objects: ds.objects.len(),
            splits: dataset_splits(ds, cfg),
        };
        write_file(&out.join("dataset.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(summary)
    };
    run().map_err(|e| e.in_stage("ingest"))
}

/// Validate an external container and copy it into the output directory.
pub fn ingest_file(input: &Path, cfg: &ExperimentConfig, out: &Path) -> Result<DatasetSummary> {
    let bytes = std::fs::read(input).map_err(|e| Error::io(input, e).in_stage("ingest"))?;
    let ds = read_container(&bytes).map_err(|e| e.in_stage("ingest"))?;
    stage_ingest(&ds, &input.display().to_string(), cfg, out)
}

pub fn stage_investigate(ds: &EmbeddingGridDataset, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let run = || -> Result<()> {
        let dir = out.join("investigate");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let ic = &cfg.investigate;
        let report = viewpoint_sensitivity_report(ds, ic.temperature)?;
        write_sensitivity_csvs(&report, &dir, "sensitivity")?;
        let gaps = random_vs_best_gap(ds, ic.temperature, ic.random_runs, cfg.seed)?;
        write_gap_csv(&gaps, &dir.join("random_vs_best.csv"))?;
        let occ = occlusion_study(ds, ic.temperature, &ic.occlusion_probs, ic.occlusion_strength, cfg.seed)?;
        write_occlusion_csv(&occ, &dir.join("occlusion.csv"))?;
        info!("viewpoint gap {:.3}, occlusion baseline {:.3}", report.aggregate_gap, occ.baseline);
        Ok(())
    };
    run().map_err(|e| e.in_stage("investigate"))
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyMeta {
    config: PolicyConfig,
    feature_dim: usize,
    num_base: usize,
}

pub fn save_models(fusion: &FusionModel, policy: &PolicyModel, out: &Path) -> Result<()> {
    let fmeta = serde_json::to_string(&fusion.config)?;
    let pmeta = serde_json::to_string(&PolicyMeta { config: policy.config, feature_dim: policy.feature_dim, num_base: policy.num_base })?;
    for (path, ck) in [
        (out.join(FUSION_CHECKPOINT), Checkpoint::capture(fusion, fmeta, None)),
        (out.join(POLICY_CHECKPOINT), Checkpoint::capture(policy, pmeta, None)),
    ] {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_checkpoint(&ck, &path)?;
    }
    Ok(())
}

pub fn load_models(out: &Path) -> Result<(FusionModel, PolicyModel)> {
    let fck = load_checkpoint(out.join(FUSION_CHECKPOINT))?;
    let fcfg: FusionConfig = serde_json::from_str(&fck.meta)?;
    let mut fusion = FusionModel::new(fcfg, &mut crate::rng::from_seed(0));
    fck.restore(&mut fusion)?;
    let pck = load_checkpoint(out.join(POLICY_CHECKPOINT))?;
    let pm: PolicyMeta = serde_json::from_str(&pck.meta)?;
    let mut policy = PolicyModel::new(pm.config, pm.feature_dim, pm.num_base, &mut crate::rng::from_seed(0));
    pck.restore(&mut policy)?;
    Ok((fusion, policy))
}

pub fn stage_train(ds: &EmbeddingGridDataset, cfg: &ExperimentConfig, out: &Path) -> Result<TrainedAgent> {
    let run = || -> Result<TrainedAgent> {
        let splits = dataset_splits(ds, cfg);
        let val: Vec<usize> =
            splits.validation.iter().copied().filter(|&o| ds.classes[ds.objects[o].class_index as usize].split == Split::Base).collect();
        let agent = train_agent(ds, &splits.train, &val, &cfg.agent, cfg.seed)?;
        save_models(&agent.fusion, &agent.policy, out)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "mean_loss", "accuracy"])?;
        for e in &agent.fusion_log {
            w.write_record([e.epoch.to_string(), format!("{:.6}", e.mean_loss), format!("{:.6}", e.accuracy)])?;
        }
        let pretrain = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        write_file(&out.join("train/fusion_pretrain.csv"), pretrain)?;
        write_file(&out.join("train/training_curve.csv"), agent.curve_csv()?)?;
        Ok(agent)
    };
    run().map_err(|e| e.in_stage("train"))
}

fn agent_for<'a>(kind: AgentKind, policy: &'a PolicyModel, greedy: bool) -> Agent<'a> {
    match kind {
        AgentKind::Random => Agent::Random,
        AgentKind::LargestStep => Agent::LargestStep,
        AgentKind::Policy => Agent::Policy { model: policy, greedy },
    }
}

fn eval_options(cfg: &ExperimentConfig) -> Result<EvalOptions> {
    Ok(EvalOptions {
        env: cfg.agent.env,
        repeats: cfg.eval.repeats,
        predictors: cfg.eval.predictors.clone(),
        seed: crate::rng::derive_seed(cfg.seed, "evaluation", 0),
        config_fingerprint: cfg.fingerprint()?,
    })
}

pub fn stage_eval(
    ds: &EmbeddingGridDataset,
    fusion: &FusionModel,
    policy: &PolicyModel,
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<EvaluationReport>> {
    let run = || -> Result<Vec<EvaluationReport>> {
        let vocab = Vocabulary::from_dataset(ds);
        let test = dataset_splits(ds, cfg).test;
        let opts = eval_options(cfg)?;
        let mut reports = Vec::new();
        for &kind in &cfg.eval.agents {
            let report = evaluate(ds, &test, agent_for(kind, policy, cfg.agent.greedy_eval), fusion, &vocab, &opts)?;
            report.write(&out.join("eval"), &format!("eval_{}", kind.as_str()))?;
            reports.push(report);
        }
        Ok(reports)
    };
    run().map_err(|e| e.in_stage("eval"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub position: (usize, usize),
    /// Move that led here; absent for the first observation.
    pub action: Option<(i32, i32)>,
    pub alpha: Vec<f64>,
    pub prediction: String,
    pub correct: bool,
    pub top3: Vec<String>,
    pub true_class_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEpisode {
    pub agent: String,
    pub episode: usize,
    pub object_id: String,
    pub label: String,
    pub split: String,
    pub steps: Vec<TraceStep>,
}

/// Per-episode JSON lines for the first `trace_episodes` evaluation episodes.
pub fn stage_trace(
    ds: &EmbeddingGridDataset,
    fusion: &FusionModel,
    policy: &PolicyModel,
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<PathBuf> {
    let run = || -> Result<PathBuf> {
        let vocab = Vocabulary::from_dataset(ds);
        let test = dataset_splits(ds, cfg).test;
        let opts = eval_options(cfg)?;
        let episodes: Vec<(usize, u64)> = evaluation_episodes(&test, &opts).into_iter().take(cfg.eval.trace_episodes).collect();
        let mut lines = String::new();
        for &kind in &cfg.eval.agents {
            for (i, &(object, seed)) in episodes.iter().enumerate() {
                let mut nav: Box<dyn Navigator> = match kind {
                    AgentKind::Random => Box::new(RandomNavigator),
                    AgentKind::LargestStep => Box::new(LargestStepNavigator),
                    AgentKind::Policy => Box::new(PolicyNavigator::new(policy, &vocab, cfg.agent.greedy_eval)),
                };
                let rec = run_episode(ds, object, opts.env, seed, nav.as_mut())?;
                let mut steps = Vec::with_capacity(rec.features.len());
                for t in 1..=rec.features.len() {
                    let fused = fusion.fuse_prefix(&rec.features[..t], &rec.proprios[..t], &vocab)?;
                    let dist = Predictor::Attention.predict(&rec, t, fusion, &vocab)?;
                    let top3 = dist.top_k(3);
                    steps.push(TraceStep {
                        t,
                        position: rec.positions[t - 1],
                        action: (t > 1).then(|| (rec.actions[t - 2].dm, rec.actions[t - 2].dn)),
                        alpha: fused.alpha[..t].to_vec(),
                        prediction: vocab.names[top3[0]].clone(),
                        correct: top3[0] == rec.label,
                        top3: top3.iter().map(|&c| vocab.names[c].clone()).collect(),
                        true_class_prob: dist.prob_of(rec.label).unwrap_or(0.0),
                    });
                }
                let line = TraceEpisode {
                    agent: kind.as_str().to_string(),
                    episode: i,
                    object_id: ds.objects[object].object_id.clone(),
                    label: vocab.names[rec.label].clone(),
                    split: Subset::from(ds.classes[rec.label].split).as_str().to_string(),
                    steps,
                };
                lines.push_str(&serde_json::to_string(&line)?);
                lines.push('\n');
            }
        }
        let path = out.join("traces/episodes.jsonl");
        write_file(&path, lines)?;
        Ok(path)
    };
    run().map_err(|e| e.in_stage("trace"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub episodes: usize,
    pub final_top1: f64,
    pub final_top3: f64,
    pub top1: Vec<f64>,
}

/// agent → predictor → split → curve.
pub type Summary = BTreeMap<String, BTreeMap<String, BTreeMap<String, CurveSummary>>>;

/// Merge every evaluation CSV under `out/eval` into `summary.json` and
/// `summary.csv` (final-step rates only).
pub fn stage_report(out: &Path) -> Result<Summary> {
    let run = || -> Result<Summary> {
        let dir = out.join("eval");
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!("no evaluation CSVs in {}", dir.display())));
        }
        #[derive(Deserialize)]
        struct Row {
            agent: String,
            predictor: String,
            split: String,
            step: usize,
            episodes: usize,
            top1: f64,
            top3: f64,
        }
        let mut summary = Summary::new();
        for f in &files {
            let mut r = csv::Reader::from_path(f).map_err(|e| Error::Format(format!("{}: {e}", f.display())))?;
            for row in r.deserialize::<Row>() {
                let row = row?;
                let c = summary
                    .entry(row.agent)
                    .or_default()
                    .entry(row.predictor)
                    .or_default()
                    .entry(row.split)
                    .or_insert(CurveSummary { episodes: row.episodes, final_top1: 0.0, final_top3: 0.0, top1: Vec::new() });
                if row.step != c.top1.len() + 1 {
                    return Err(Error::Format(format!("{}: steps out of order", f.display())));
                }
                c.top1.push(row.top1);
                c.final_top1 = row.top1;
                c.final_top3 = row.top3;
            }
        }
        write_file(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["agent", "predictor", "split", "episodes", "final_top1", "final_top3"])?;
        for (agent, preds) in &summary {
            for (pred, splits) in preds {
                for (split, c) in splits {
                    w.write_record([
                        agent.clone(),
                        pred.clone(),
                        split.clone(),
                        c.episodes.to_string(),
                        format!("{:.6}", c.final_top1),
                        format!("{:.6}", c.final_top3),
                    ])?;
                }
            }
        }
        write_file(&out.join("summary.csv"), w.into_inner().map_err(|e| Error::Format(e.to_string()))?)?;
        Ok(summary)
    };
    run().map_err(|e| e.in_stage("report"))
}

/// Every stage in order: dataset, investigation, training, evaluation,
/// traces and the merged report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg.out.clone();
    let (ds, source) = match &cfg.dataset.path {
        Some(p) => (load_container(p).map_err(|e| e.in_stage("ingest"))?, p.display().to_string()),
        None => (generate_synthetic(&cfg.synth).map_err(|e| e.in_stage("ingest"))?, "synthetic".to_string()),
    };
    stage_ingest(&ds, &source, cfg, &out)?;
    write_file(&out.join("config.toml"), cfg.to_toml()?).map_err(|e| e.in_stage("ingest"))?;
    stage_investigate(&ds, cfg, &out)?;
    let agent = stage_train(&ds, cfg, &out)?;
    stage_eval(&ds, &agent.fusion, &agent.policy, cfg, &out)?;
    stage_trace(&ds, &agent.fusion, &agent.policy, cfg, &out)?;
    stage_report(&out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SynthConfig;

    fn small_config(out: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.out = out.to_path_buf();
        c.synth = SynthConfig {
            num_base: 3,
            num_novel: 2,
            objects_per_class: 8,
            test_objects_per_class: 3,
            dim: 16,
            rows: 6,
            cols: 6,
            ..SynthConfig::default()
        };
        c.agent.ppo.updates = 3;
        c.agent.fusion_train.epochs = 1;
        c.eval.trace_episodes = 2;
        c
    }

    #[test]
    fn splits_partition_every_class() {
        let ds = generate_synthetic(&small_config(Path::new("")).synth).unwrap();
        let s = split_objects(&ds, 3, 2);
        assert_eq!(s.test.len(), 5 * 3);
        assert_eq!(s.validation.len(), 5 * 2);
        assert_eq!(s.train.len(), 5 * 3);
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..ds.objects.len()).collect::<Vec<_>>());
        // never holds out a class's last training object
        assert_eq!(split_objects(&ds, 7, 5).train.len(), 5);
    }

    #[test]
    fn missing_dataset_names_the_ingest_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.dataset.path = Some(dir.path().join("absent.aovr"));
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "ingest", .. }), "{err}");
        assert!(err.to_string().contains("ingest"));
    }

    #[test]
    fn full_run_writes_every_artifact_and_three_split_sections() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        run_experiment(&cfg).unwrap();
        for f in [
            "dataset.aovr", "dataset.json", "config.toml", "investigate/sensitivity_maps.csv", "investigate/occlusion.csv",
            "investigate/random_vs_best.csv", FUSION_CHECKPOINT, POLICY_CHECKPOINT, "train/training_curve.csv",
            "eval/eval_policy.csv", "eval/eval_random.json", "traces/episodes.jsonl", "summary.json", "summary.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let summary = stage_report(dir.path()).unwrap();
        for preds in summary.values() {
            for splits in preds.values() {
                assert_eq!(splits.keys().map(String::as_str).collect::<Vec<_>>(), vec!["base", "novel", "open"]);
            }
        }
        let traces = std::fs::read_to_string(dir.path().join("traces/episodes.jsonl")).unwrap();
        assert_eq!(traces.lines().count(), 3 * 2);
        let first: TraceEpisode = serde_json::from_str(traces.lines().next().unwrap()).unwrap();
        assert_eq!(first.steps.len(), 6);
        assert_eq!(first.steps[0].alpha, vec![1.0]);
    }

    #[test]
    fn checkpoints_restore_the_models() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let ds = generate_synthetic(&cfg.synth).unwrap();
        let agent = stage_train(&ds, &cfg, dir.path()).unwrap();
        let (f, p) = load_models(dir.path()).unwrap();
        assert_eq!(p.projection_checksum().len(), 64);
        use crate::nn::Module;
        for (a, b) in agent.policy.params().iter().zip(p.params()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.iter().zip(&b.value) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        assert_eq!(f.config, agent.fusion.config);
    }
}
