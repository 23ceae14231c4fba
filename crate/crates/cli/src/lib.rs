//! Experiment orchestration for the variance-branch actor-critic: run
//! configuration, multi-seed training runs, curve aggregation, feature-map
//! export and convergence comparisons.

pub mod compare;
pub mod config;
pub mod curves;
pub mod error;
pub mod featmap;
pub mod run;

pub use config::{parse_config, parse_config_str, Mode, ModeSelection, ReportConfig, RunConfig};
pub use error::{CliError, Result};
