//! Evaluation, experiment orchestration and reporting.

mod config;
mod eval;
mod experiment;

pub use eval::{
    evaluate, evaluation_episodes, Agent, EvalOptions, EvaluationReport, PredictorReport, Predictor, SplitCurve,
    EVAL_SCHEMA_VERSION,
};
pub use config::{AgentKind, DatasetConfig, EvalConfig, ExperimentConfig, InvestigateConfig};
pub use experiment::{
    dataset_splits, ingest_file, load_models, resolve_dataset, run_experiment, save_models, split_objects, stage_eval,
    stage_ingest, stage_investigate, stage_report, stage_trace, stage_train, test_objects_per_class, CurveSummary,
    DatasetSummary, ObjectSplits, Summary, TraceEpisode, TraceStep, DATASET_FILE, FUSION_CHECKPOINT, POLICY_CHECKPOINT,
};
