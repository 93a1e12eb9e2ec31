//! Orchestration of the count, crop and recognise pipeline: configuration,
//! the pipeline commands and overlay rendering.

pub mod config;
pub mod pipeline;
pub mod viz;

pub use config::PipelineConfig;
pub use pipeline::{EvalReport, Mode, Pipeline};
