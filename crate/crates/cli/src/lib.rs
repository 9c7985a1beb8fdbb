//! Configuration and phase orchestration behind the `ulfenc` binary.

pub mod config;
pub mod pipeline;

pub use config::PipelineConfig;
pub use pipeline::{run_pipeline, PipelineOutcome};
