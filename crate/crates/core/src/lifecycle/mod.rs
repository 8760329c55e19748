//! Embedding versions, the backward-compatibility transform between
//! consecutive versions and the on-disk version registry.

mod compat;
mod registry;
mod transform;

pub use compat::{evaluate_compat, kendall_tau_b, CompatReport};
pub use registry::{EmbeddingVersion, Registry, RegistryFile, TransformRecord, VersionStatus};
pub use transform::{
    apply_transform, compose, fit_backward_transform, fit_loss, fit_with, FitOptions,
    VersionTransform, RIDGE,
};
