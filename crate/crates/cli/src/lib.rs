//! Pipeline orchestration for the group-preference alignment lab: stage
//! runners, configuration and artifact layout.

pub mod config;
pub mod stages;

pub use config::PipelineConfig;
pub use stages::{run_pipeline, run_stage, Artifacts, Stage, StageError};
