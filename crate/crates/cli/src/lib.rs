//! Experiment orchestration for the `brainsbi` command: run configuration,
//! per-stage manifests with content hashes, and the pipeline stages.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use manifest::{Layout, Stage, StageManifest};
