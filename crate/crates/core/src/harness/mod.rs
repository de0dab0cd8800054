//! Operator surface: configuration, synthetic data and the commands behind
//! the `dlpnn` binary.
//!
//! A run directory holds:
//!
//! ```text
//! config.txt            every config key, defaults included
//! epochs.jsonl          {"epoch", "mean_query_loss", "train_auc", "val_auc", "n_tasks"}
//! timing.jsonl          {"epoch", "wall_ms"}; the only non-deterministic file
//! checkpoint_last.bin   parameters after the latest epoch
//! checkpoint_best.bin   parameters with the best validation AUC
//! train_report.json     best epoch, task counts, graph summary
//! report.json           {"acc", "auc", "macro_f1", "n_pos", "n_neg", "n_tasks"}
//! per_task.csv          task_id,n_query,auc
//! ```

pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod synth;

pub use commands::*;
pub use config::RunConfig;
pub use synth::{SynthOutput, SynthSpec};

/// Directory against which relative `data` and `node_features` paths are
/// resolved.
pub const DATA_DIR_ENV: &str = "DLPNN_DATA_DIR";
