//! Metrics, synthetic worlds and experiment templates.

pub mod auc;
pub mod experiment;
pub mod planted;
pub mod world;

pub use auc::compute_auc;
pub use planted::{planted_graph, PlantedConfig, PlantedGraph};
pub use world::{
    calibrate_bias, generate_world, GroundTruth, SyntheticWorldConfig, World, WorldManifest,
    WORLD_FILES,
};
pub use experiment::{
    run_experiment, ArmResult, Check, ExperimentSpec, MetricsReport, TracePoint, TEMPLATES,
};
