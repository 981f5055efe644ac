//! Config-driven driver for EWAS training, evaluation, ablation sweeps and
//! activation export.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{
    cmd_ablate, cmd_eval, cmd_export_activations, cmd_train, Axis, CHECKPOINT, TRAIN_LOG,
};
pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};
