//! Configuration-driven orchestration of the full workflow.

pub mod config;
pub mod stages;

pub use config::{stage_seed, Architecture, ModelSpec, NamedAttack, RunConfig};
pub use stages::{
    attack_stage, capture_stage, evaluate_stage, report_stage, run, select_stage, similarity_stage, train_zoo,
    Layout, STAGES,
};
