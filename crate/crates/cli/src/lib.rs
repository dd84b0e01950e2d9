//! Orchestration for the memory-retrieval recommender: run configuration,
//! stage manifests with a hash chain, and the pipeline stages behind the
//! `mrgr` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use commands::run;
pub use config::RunConfig;
pub use error::{CliError, Result};
pub use manifest::{Artifact, RunManifest, Stage, Workspace};
pub use stages::DataSource;
