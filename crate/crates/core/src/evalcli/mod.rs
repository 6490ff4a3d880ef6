//! Attack metrics, the quality statistic, experiment configuration and
//! orchestration, and file output.

pub mod config;
pub mod experiment;
pub mod metrics;

pub use config::{DataConfig, ExperimentConfig, MetricConfig, ProbeConfig};
pub use experiment::{
    diagnose_stage, eval_all, eval_stage, evaluate, generation_quality, pretrained_base, read_kv, read_smoothness,
    report_stage, run_experiment, seed_context, train_all, train_stage, Evaluation, ExperimentOutcome, SeedContext,
    TrainedRun, SUMMARY_METRICS,
};
pub use metrics::{
    asr, auc_pair_count, kernel_quality, roc_auc, summarize, summarize_streaming, tpr_at_fpr, MetricReport, ScoreSet,
    Summary,
};
