//! Experiment harness: configuration, ingestion, orchestration and reports.
//!
//! Environment:
//! - `AVSHIELD_OUT_DIR`: root for run directories when the config has no `output_dir`.
//! - `AVSHIELD_THREADS`: worker threads for per-item parallelism (unset or 0 = all cores).

pub mod config;
pub mod ingest;
pub mod io;
pub mod report;
pub mod run;

pub use config::{Mode, RunConfig, ENV_OUT_DIR, ENV_THREADS};
pub use ingest::{ingest, Item, ItemError};
pub use report::{emit_report, EvalReport, Record};
pub use run::{item_seed, protect_item, run, RunOutcome};
