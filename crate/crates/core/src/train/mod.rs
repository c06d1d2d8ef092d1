//! The joint training loop, its configuration, logging and the ablation
//! harness.

pub mod ablation;
pub mod config;
pub mod log;
mod trainer;

pub use ablation::{run_ablation, AblationReport, AblationRow, Variant};
pub use config::{LrMode, RunConfig, ViewSampling, DEFAULT_EXPOSURE_TARGET};
pub use log::{parse_log, read_log, validate_log, write_log, LogRow, LOG_HEADER};
pub use trainer::{mean_luma_std, SceneData, Trainer};
