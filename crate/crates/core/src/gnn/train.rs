use std::collections::{BTreeSet, HashSet};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::task_loss_node;
use super::model::BnRecord;
use super::{AdaptiveSamplingConfig, AdaptiveSchedule, GnnModel, LinkTask, MultiTaskConfig, Tower};
use crate::error::{Error, Result};
use crate::eval::compute_auc;
use crate::graph::{
    subgraph_batch, EdgeMask, HeteroGraph, NodeRef, Sampler, SamplerConfig, SamplingStrategy,
    SubgraphBatch,
};
use crate::io_util;
use crate::numeric::{AdamW, AdamWConfig, BatchNormMode, NodeId, ValueGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnTrainConfig {
    pub epochs: usize,
    /// Positive pairs per task per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub strategy: SamplingStrategy,
    /// Share of each task's edges kept visible for message passing.
    pub message_fraction: f64,
    /// Share of each task's edges held out for validation.
    pub val_fraction: f64,
    /// Cap on validation positives per task.
    pub max_val_pairs: usize,
}

impl Default for GnnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            lr: 3e-3,
            warmup_steps: 0,
            seed: 7,
            strategy: SamplingStrategy::Random,
            message_fraction: 0.4,
            val_fraction: 0.2,
            max_val_pairs: 2000,
        }
    }
}

impl GnnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.message_fraction >= 0.0 && self.val_fraction > 0.0)
            || self.message_fraction + self.val_fraction >= 1.0
        {
            return Err(Error::invalid(
                "need message_fraction >= 0, val_fraction > 0 and their sum < 1",
            ));
        }
        Ok(())
    }
}

/// Edges of one task, split three ways.
#[derive(Clone, Debug)]
pub struct TaskEdges {
    pub task: LinkTask,
    /// Left in the graph for message passing.
    pub message: Vec<(usize, usize)>,
    /// Supervision for training; hidden from sampling.
    pub train: Vec<(usize, usize)>,
    /// Validation pairs with labels; positives hidden from sampling.
    pub val: Vec<(usize, usize, bool)>,
    positives: HashSet<(usize, usize)>,
    dst_pool: Range<usize>,
}

impl TaskEdges {
    fn negative(&self, src: usize, rng: &mut ChaCha8Rng) -> usize {
        let mut d = rng.random_range(self.dst_pool.clone());
        for _ in 0..16 {
            if !self.positives.contains(&(src, d)) {
                break;
            }
            d = rng.random_range(self.dst_pool.clone());
        }
        d
    }
}

/// Per-task edge splits for the tasks with positive weight, plus the mask
/// that hides supervision and validation pairs from the samplers.
#[derive(Clone, Debug)]
pub struct EdgeSplit {
    pub tasks: Vec<TaskEdges>,
    pub mask: EdgeMask,
}

impl EdgeSplit {
    pub fn new(g: &HeteroGraph, mt: &MultiTaskConfig, cfg: &GnnTrainConfig) -> Result<Self> {
        mt.validate(g.registry())?;
        cfg.validate()?;
        let mut tasks = Vec::new();
        let mut mask = EdgeMask::new();
        for task in mt.tasks.iter().filter(|t| t.lambda > 0.0) {
            let pairs: BTreeSet<(usize, usize)> = g
                .edges_of_type(&task.edge_type)?
                .into_iter()
                .map(|(s, d, _, _)| (s, d))
                .collect();
            let mut pairs: Vec<_> = pairs.into_iter().collect();
            if pairs.len() < 3 {
                return Err(Error::invalid(format!(
                    "task {} has {} distinct edges, need at least 3",
                    task.name,
                    pairs.len()
                )));
            }
            let dst_pool = g.nodes_of_type(task.dst_type);
            let mut rng = io_util::derived_rng(cfg.seed, &format!("split/{}", task.name));
            pairs.shuffle(&mut rng);
            let n = pairs.len();
            let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 2);
            let n_msg = ((n as f64 * cfg.message_fraction).round() as usize).min(n - n_val - 1);
            let val_pos = &pairs[..n_val];
            let message = pairs[n_val..n_val + n_msg].to_vec();
            let mut train = pairs[n_val + n_msg..].to_vec();
            train.sort_unstable();
            for &(a, b) in val_pos.iter().chain(&train) {
                mask.insert(a, b);
            }
            let mut te = TaskEdges {
                task: task.clone(),
                message,
                train,
                val: Vec::new(),
                positives: pairs.iter().copied().collect(),
                dst_pool,
            };
            let mut val = Vec::new();
            for &(s, d) in val_pos.iter().take(cfg.max_val_pairs) {
                val.push((s, d, true));
                val.push((s, te.negative(s, &mut rng), false));
            }
            te.val = val;
            tasks.push(te);
        }
        if tasks.is_empty() {
            return Err(Error::invalid("no task has a positive weight"));
        }
        Ok(Self { tasks, mask })
    }
}

/// Scored pairs of one task together with their sampled neighborhoods.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub task: usize,
    pub lambda: f64,
    pub labels: Vec<bool>,
    pub src: SubgraphBatch,
    pub dst: SubgraphBatch,
}

impl TaskBatch {
    pub fn sampled_edges(&self) -> usize {
        self.src.sampled_edges + self.dst.sampled_edges
    }
}

/// Samples neighborhoods for labelled pairs `(src, dst, label)`.
pub fn sample_task_batch(
    g: &HeteroGraph,
    task: usize,
    lambda: f64,
    pairs: &[(usize, usize, bool)],
    sampler: &mut Sampler,
    fanouts: &[usize],
    mask: Option<&EdgeMask>,
) -> Result<TaskBatch> {
    let all: Vec<usize> = (0..g.edge_types().len()).collect();
    let srcs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let dsts: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    Ok(TaskBatch {
        task,
        lambda,
        labels: pairs.iter().map(|p| p.2).collect(),
        src: subgraph_batch(g, &srcs, fanouts, sampler, &all, mask)?,
        dst: subgraph_batch(g, &dsts, fanouts, sampler, &all, mask)?,
    })
}

pub struct LossGraph {
    pub graph: ValueGraph,
    pub total: NodeId,
    /// Loss node of each batch, in batch order.
    pub per_task: Vec<NodeId>,
    bn: Vec<BnRecord>,
}

/// Records `Σ λᵢ Lᵢ` over the batches with train-mode batch norm.
pub fn build_loss_graph(
    model: &GnnModel,
    g: &HeteroGraph,
    batches: &[TaskBatch],
    trainable: bool,
) -> Result<LossGraph> {
    let mut vg = ValueGraph::new();
    let bound = model.bind(&mut vg, trainable)?;
    let mut bn = Vec::new();
    let mut per_task = Vec::new();
    let mut total: Option<NodeId> = None;
    for b in batches {
        let es = model.encode_graph(&mut vg, &bound, g, &b.src, Tower::Source, BatchNormMode::Train, &mut bn)?;
        let ed = model.encode_graph(&mut vg, &bound, g, &b.dst, Tower::Destination, BatchNormMode::Train, &mut bn)?;
        let logits = vg.row_dot(es, ed)?;
        let l = task_loss_node(&mut vg, logits, &b.labels)?;
        per_task.push(l);
        if b.lambda != 0.0 {
            let w = vg.scale(l, b.lambda)?;
            total = Some(match total {
                None => w,
                Some(t) => vg.add(t, w)?,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => vg.input(crate::numeric::Tensor::scalar(0.0)),
    };
    Ok(LossGraph {
        graph: vg,
        total,
        per_task,
        bn,
    })
}

fn eval_sampler(fanout: usize) -> Result<Sampler> {
    Sampler::new(SamplerConfig {
        strategy: SamplingStrategy::Temporal,
        fanout: fanout.max(1),
        seed: 0,
        ..SamplerConfig::default()
    })
}

/// Validation AUC per task using deterministic temporal sampling.
pub fn evaluate(model: &GnnModel, g: &HeteroGraph, split: &EdgeSplit, fanout: usize) -> Result<Vec<f64>> {
    let fanouts = vec![fanout; model.config().num_layers];
    let mut sampler = eval_sampler(fanout)?;
    let mut out = Vec::with_capacity(split.tasks.len());
    for (ti, te) in split.tasks.iter().enumerate() {
        let mut scores = Vec::with_capacity(te.val.len());
        for chunk in te.val.chunks(512) {
            let b = sample_task_batch(g, ti, 1.0, chunk, &mut sampler, &fanouts, Some(&split.mask))?;
            let es = model.encode(g, &b.src, Tower::Source)?;
            let ed = model.encode(g, &b.dst, Tower::Destination)?;
            for i in 0..chunk.len() {
                scores.push(es.row(i).iter().zip(ed.row(i)).map(|(a, b)| a * b).sum());
            }
        }
        let labels: Vec<bool> = te.val.iter().map(|p| p.2).collect();
        out.push(compute_auc(&scores, &labels)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub eval_index: usize,
    pub step: u64,
    /// Mean of the per-task validation AUCs.
    pub val_auc: f64,
    pub task_auc: Vec<f64>,
    /// Fanout in force for the steps leading up to this evaluation.
    pub sample_count: usize,
    /// Cumulative sampled edges over all training steps so far.
    pub sampled_edges: u64,
    /// Mean weighted loss since the previous evaluation.
    pub train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Model at the best evaluation.
    pub model: GnnModel,
    pub trace: Vec<EvalRecord>,
    pub best_auc: f64,
    pub total_sampled_edges: u64,
    /// Weighted loss of every optimizer step.
    pub loss_curve: Vec<f64>,
    pub steps: u64,
    pub task_names: Vec<String>,
    /// Set when training stopped early on a non-finite value.
    pub aborted: Option<String>,
}

/// Multi-task training with the adaptive fanout schedule. Evaluations run
/// at the configured cadence and once more after the final step.
pub fn adaptive_train(
    g: &HeteroGraph,
    mut model: GnnModel,
    mt: &MultiTaskConfig,
    asc: &AdaptiveSamplingConfig,
    cfg: &GnnTrainConfig,
) -> Result<TrainReport> {
    let split = EdgeSplit::new(g, mt, cfg)?;
    let mut schedule = AdaptiveSchedule::new(asc.clone())?;
    let opt_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: model.config().l2_reg,
        warmup_steps: cfg.warmup_steps,
        ..AdamWConfig::default()
    };
    opt_cfg.validate()?;
    let mut opt = AdamW::new(opt_cfg);
    let mut sampler = Sampler::new(SamplerConfig {
        strategy: cfg.strategy,
        fanout: asc.sigma,
        seed: io_util::derive_seed(cfg.seed, "gnn-train-sampler"),
        ..SamplerConfig::default()
    })?;
    let mut task_rngs: Vec<ChaCha8Rng> = split
        .tasks
        .iter()
        .map(|t| io_util::derived_rng(cfg.seed, &format!("task/{}", t.task.name)))
        .collect();
    let mut orders: Vec<Vec<(usize, usize)>> = split.tasks.iter().map(|t| t.train.clone()).collect();

    let steps_per_epoch = split
        .tasks
        .iter()
        .map(|t| t.train.len().div_ceil(cfg.batch_size))
        .max()
        .unwrap_or(1)
        .max(1);
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;
    let interval = ((asc.eval_every * steps_per_epoch as f64).round() as u64).max(1);

    let mut trace = Vec::new();
    let mut loss_curve = Vec::new();
    // Falls back to the initial weights if training stops before any evaluation.
    let mut best = model.clone();
    let mut best_auc = f64::NEG_INFINITY;
    let mut sampled: u64 = 0;
    let (mut loss_acc, mut loss_n) = (0.0, 0usize);
    let mut aborted = None;
    let mut step = 0u64;

    'outer: for _epoch in 0..cfg.epochs {
        for (o, rng) in orders.iter_mut().zip(task_rngs.iter_mut()) {
            o.shuffle(rng);
        }
        for s in 0..steps_per_epoch {
            let fanouts = vec![schedule.sample_count(); model.config().num_layers];
            let mut batches = Vec::with_capacity(split.tasks.len());
            for (ti, te) in split.tasks.iter().enumerate() {
                let order = &orders[ti];
                let rng = &mut task_rngs[ti];
                let mut pairs = Vec::with_capacity(cfg.batch_size * (1 + te.task.neg_ratio));
                for k in 0..cfg.batch_size {
                    let (a, b) = order[(s * cfg.batch_size + k) % order.len()];
                    pairs.push((a, b, true));
                    for _ in 0..te.task.neg_ratio {
                        pairs.push((a, te.negative(a, rng), false));
                    }
                }
                batches.push(sample_task_batch(
                    g,
                    ti,
                    te.task.lambda,
                    &pairs,
                    &mut sampler,
                    &fanouts,
                    Some(&split.mask),
                )?);
            }
            sampled += batches.iter().map(|b| b.sampled_edges() as u64).sum::<u64>();

            let outcome = (|| -> Result<f64> {
                let mut lg = build_loss_graph(&model, g, &batches, true)?;
                lg.graph.backward(lg.total)?;
                let loss = lg.graph.value(lg.total).data()[0];
                let grads = lg.graph.param_grads();
                opt.step(model.params_mut(), &grads)?;
                for (prefix, node) in &lg.bn {
                    if let Some(stats) = lg.graph.batch_stats(*node) {
                        model.update_bn(prefix, stats);
                    }
                }
                Ok(loss)
            })();
            let loss = match outcome {
                Ok(l) => l,
                Err(e @ Error::NonFinite(_)) => {
                    log::warn!("training stopped at step {}: {e}", step + 1);
                    aborted = Some(format!("step {}: {e}", step + 1));
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            step += 1;
            loss_curve.push(loss);
            loss_acc += loss;
            loss_n += 1;

            if step % interval == 0 || step == total_steps {
                let task_auc = match evaluate(&model, g, &split, asc.alpha) {
                    Ok(a) => a,
                    Err(e @ Error::NonFinite(_)) => {
                        log::warn!("evaluation after step {step} failed: {e}");
                        aborted = Some(format!("evaluation after step {step}: {e}"));
                        break 'outer;
                    }
                    Err(e) => return Err(e),
                };
                let val_auc = task_auc.iter().sum::<f64>() / task_auc.len() as f64;
                trace.push(EvalRecord {
                    eval_index: trace.len(),
                    step,
                    val_auc,
                    task_auc,
                    sample_count: schedule.sample_count(),
                    sampled_edges: sampled,
                    train_loss: loss_acc / loss_n.max(1) as f64,
                });
                log::debug!("gnn eval {}: auc {val_auc:.4} fanout {}", trace.len(), schedule.sample_count());
                loss_acc = 0.0;
                loss_n = 0;
                if val_auc > best_auc {
                    best_auc = val_auc;
                    best = model.clone();
                }
                schedule.observe(val_auc);
            }
        }
    }

    Ok(TrainReport {
        model: best,
        trace,
        best_auc,
        total_sampled_edges: sampled,
        loss_curve,
        steps: step,
        task_names: split.tasks.iter().map(|t| t.task.name.clone()).collect(),
        aborted,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferResult {
    pub entries: Vec<(NodeRef, Vec<f32>)>,
    /// Requested nodes that are not in the graph.
    pub missing: usize,
}

/// One embedding per requested node that exists, using temporal sampling
/// capped at `fanout`.
pub fn infer_embeddings(
    g: &HeteroGraph,
    model: &GnnModel,
    nodes: &[NodeRef],
    tower: Tower,
    fanout: usize,
) -> Result<InferResult> {
    let mut present = Vec::new();
    let mut missing = 0;
    for &n in nodes {
        match g.node_index(n) {
            Some(i) => present.push((n, i)),
            None => missing += 1,
        }
    }
    if missing > 0 {
        log::warn!("{missing} requested nodes are not in the graph");
    }
    let fanouts = vec![fanout; model.config().num_layers];
    let all: Vec<usize> = (0..g.edge_types().len()).collect();
    let mut sampler = eval_sampler(fanout)?;
    let mut entries = Vec::with_capacity(present.len());
    for chunk in present.chunks(256) {
        let seeds: Vec<usize> = chunk.iter().map(|p| p.1).collect();
        let batch = subgraph_batch(g, &seeds, &fanouts, &mut sampler, &all, None)?;
        let e = model.encode(g, &batch, tower)?;
        for (i, (n, _)) in chunk.iter().enumerate() {
            entries.push((*n, e.row(i).iter().map(|&v| v as f32).collect()));
        }
    }
    Ok(InferResult { entries, missing })
}
