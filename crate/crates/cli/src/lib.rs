//! Library side of the experiment driver: configuration, pipeline
//! orchestration, and report schema validation. The `viscop` binary is a
//! thin argument parser over these functions.

pub mod config;
pub mod pipeline;
pub mod schema;

pub use config::ExperimentConfig;
pub use pipeline::PipelineError;
