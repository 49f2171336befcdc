//! End-to-end pipeline: configuration, space-alignment pretraining,
//! sequential masked diffuser training, weights assembling, continual
//! evaluation, and report emission.

mod agent;
mod config;
mod report;
mod runner;

pub use agent::{ActionDecode, Aligner, MinMax, PadAligner, PolicyAgent};
pub use config::{
    validate_config, ActionMode, Alignment, IdmParams, PipelineConfig, UnetParams,
    CONFIG_SCHEMA_VERSION,
};
pub use report::{emit_report, RunSummary};
pub use runner::{
    build_windows, evaluate_continual, mean_normalized_final, prune_and_eval, run_pipeline,
    stage_assemble, stage_qsa, stage_swa, Layout, PruneOutcome, RunArtifacts,
};
