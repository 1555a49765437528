//! Datasets, checkpoints, evaluation and experiment orchestration.

mod checkpoint;
mod data;
mod eval;
mod experiment;
mod report;

pub use checkpoint::{
    load_classifier, load_denoiser, save_classifier, save_denoiser, Checkpoint, ClassifierMeta,
    ModuleKind, ScheduleSpec, FORMAT_VERSION,
};
pub use data::{generate_dataset, Dataset, DatasetKind, DatasetSpec, Split};
pub use eval::{
    craft_adversarial, evaluate, evaluate_with, AttackOutcome, AttackSharing, Defence,
    EvalOptions, EvalReport, DEFAULT_EVAL_BATCH, DEFAULT_EVAL_SAMPLES,
};
pub use experiment::{
    run_experiment, run_experiment_path, ClassifierTrainConfig, Experiment, ExperimentConfig,
    ExperimentEval, ExperimentReport, LambdaPoint, Layout, Models, Stages,
};
pub use report::{
    metrics_rows, write_lambda_plot, write_metrics, write_modes_plot, MetricsRow,
    GUIDANCE_CLASSIFIER, METRICS_COLUMNS, UNDEFENDED,
};
