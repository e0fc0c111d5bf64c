//! Training, cross-validation, benchmarking and checkpointing on top of
//! `mltn-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{DataSection, ModelKind, TrainConfig};
pub use error::{CliError, Result};
