//! Pipeline orchestration behind the `gelina` binary.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{PipelineError, Result};
pub use pipeline::{Pipeline, Stage, Synthesis};
