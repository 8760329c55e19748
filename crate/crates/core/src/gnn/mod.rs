//! Multi-task link prediction over the heterogeneous graph with an
//! attention encoder, dot-product scoring and adaptive neighbor sampling.

mod loss;
mod model;
mod schedule;
mod train;

pub use loss::{multi_task_loss, score, task_loss, task_loss_node};
pub use model::{GnnModel, InputDims, Tower};
pub use schedule::{AdaptiveSamplingConfig, AdaptiveSchedule};
pub use train::{
    adaptive_train, build_loss_graph, evaluate, infer_embeddings, sample_task_batch, EdgeSplit,
    EvalRecord, GnnTrainConfig, InferResult, LossGraph, TaskBatch, TrainReport,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeRegistry, NodeType};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    SelfAttention,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "self_attention" => Ok(Pooling::SelfAttention),
            _ => Err(Error::invalid(format!("unknown pooling {s:?} (mean, self_attention)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    pub embedding_dim: usize,
    /// Hidden width is `units_multiplier × embedding_dim`.
    pub units_multiplier: usize,
    pub attention_heads: usize,
    pub num_layers: usize,
    pub pooling: Pooling,
    pub dual_encoder: bool,
    /// Start the destination tower as a copy of the source tower.
    pub tied_init: bool,
    pub include_target_node: bool,
    pub l2_reg: f64,
    pub batch_norm: bool,
    pub id_dim: usize,
    pub categorical_dim: usize,
    pub use_text: bool,
    pub use_categorical: bool,
    pub use_id: bool,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 200,
            units_multiplier: 4,
            attention_heads: 4,
            num_layers: 2,
            pooling: Pooling::SelfAttention,
            dual_encoder: true,
            tied_init: false,
            include_target_node: true,
            l2_reg: 1e-5,
            batch_norm: true,
            id_dim: 16,
            categorical_dim: 16,
            use_text: true,
            use_categorical: true,
            use_id: true,
        }
    }
}

impl GnnConfig {
    pub fn hidden(&self) -> usize {
        self.units_multiplier * self.embedding_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.units_multiplier == 0 || self.attention_heads == 0 {
            return Err(Error::invalid(
                "embedding_dim, units_multiplier and attention_heads must be positive",
            ));
        }
        if self.hidden() % self.attention_heads != 0 {
            return Err(Error::invalid(format!(
                "hidden width {} is not divisible by {} attention heads",
                self.hidden(),
                self.attention_heads
            )));
        }
        if !(self.l2_reg >= 0.0) {
            return Err(Error::invalid("l2_reg must be non-negative"));
        }
        Ok(())
    }
}

/// One link-prediction objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkTask {
    pub name: String,
    pub edge_type: String,
    pub src_type: NodeType,
    pub dst_type: NodeType,
    pub lambda: f64,
    #[serde(default = "one")]
    pub neg_ratio: usize,
}

fn one() -> usize {
    1
}

impl LinkTask {
    pub fn new(name: &str, edge_type: &str, src: NodeType, dst: NodeType, lambda: f64) -> Self {
        Self {
            name: name.into(),
            edge_type: edge_type.into(),
            src_type: src,
            dst_type: dst,
            lambda,
            neg_ratio: 1,
        }
    }

    /// The three marketplace objectives with unit weights.
    pub fn standard() -> Vec<LinkTask> {
        vec![
            LinkTask::new("job_apply", "member-job-APPLY", NodeType::Member, NodeType::Job, 1.0),
            LinkTask::new(
                "recruiter_inmail",
                "recruiter-member-INMAIL",
                NodeType::Recruiter,
                NodeType::Member,
                1.0,
            ),
            LinkTask::new(
                "top_applicant",
                "job-member-TOP_APPLICANT",
                NodeType::Job,
                NodeType::Member,
                1.0,
            ),
        ]
    }

    pub fn validate(&self, registry: &EdgeRegistry) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("task {}: lambda must be >= 0", self.name)));
        }
        if self.neg_ratio == 0 {
            return Err(Error::invalid(format!("task {}: neg_ratio must be >= 1", self.name)));
        }
        let spec = registry
            .get(&self.edge_type)
            .ok_or_else(|| Error::invalid(format!("task {}: unknown edge type {}", self.name, self.edge_type)))?;
        if spec.src != self.src_type || spec.dst != self.dst_type {
            return Err(Error::invalid(format!(
                "task {}: {} connects {} to {}, task declares {} to {}",
                self.name, spec.name, spec.src, spec.dst, self.src_type, self.dst_type
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskConfig {
    pub tasks: Vec<LinkTask>,
}

impl MultiTaskConfig {
    pub fn validate(&self, registry: &EdgeRegistry) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::invalid("at least one task is required"));
        }
        for t in &self.tasks {
            t.validate(registry)?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = crate::io_util::read_to_string(path)?;
        Ok(Self {
            tasks: serde_json::from_str(&text)?,
        })
    }
}
