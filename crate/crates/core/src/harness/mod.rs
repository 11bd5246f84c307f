//! Synthetic data, evaluation and the staged end-to-end run.

pub mod commands;
pub mod config;
pub mod eval;
pub mod pipeline;
pub mod synthetic;

pub use config::{component_seed, parse_key_values, PipelineConfig};
pub use eval::{
    evaluate, exact_match, normalize_answer, DevQuestion, EvalConfig, EvalReport, Prediction,
    QaSystem,
};
pub use pipeline::{
    prepare, run_pipeline, FilterSummary, PipelineTrace, Prepared, StageRecord, STAGE_LABELS,
};
pub use synthetic::{gen_synthetic, SyntheticConfig, SyntheticDataset};
