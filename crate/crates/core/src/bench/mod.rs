//! Synthetic benchmark: task generation, experiment presets and reporting.

pub mod config;
pub mod experiment;
pub mod plot;
pub mod task;

pub use config::ExperimentConfig;
pub use experiment::{alpha_sweep, prepare_seed, run_experiment, run_preset, Plan, Preset, RunResult, SeedContext};
pub use task::{generate_task, FewShotSplit, GeneratedTask, TaskLayout, TaskSpec};
