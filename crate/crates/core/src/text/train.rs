use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{compute_loss, EmbeddedBatch, LossConfig};
use super::{BiEncoder, TrainingPair};
use crate::error::{Error, Result};
use crate::eval::compute_auc;
use crate::io_util;
use crate::numeric::{accumulate_grads_scaled, AdamW, AdamWConfig, Grads, Tensor, TrainConfig, ValueGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Encoder and head are both updated.
    Full,
    /// Encoder frozen at its initial weights; only the head learns.
    HeadOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub batch: TrainConfig,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    /// Validation cadence as a fraction of an epoch.
    pub eval_every: f64,
    pub val_fraction: f64,
    pub mode: TrainMode,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            batch: TrainConfig::default(),
            optimizer: AdamWConfig {
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
            loss: LossConfig::default(),
            epochs: 1,
            eval_every: 0.1,
            val_fraction: 0.2,
            mode: TrainMode::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucCheck {
    pub step: u64,
    pub epoch: f64,
    pub val_auc: f64,
    /// Mean micro-batch loss since the previous check.
    pub train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation check.
    pub model: BiEncoder,
    pub trace: Vec<AucCheck>,
    pub best_auc: f64,
    pub effective_batch_size: usize,
    pub train_size: usize,
    pub val_size: usize,
}

/// Downsample the majority class to the size of the minority class. Kept
/// pairs retain their input order.
pub fn balance_pairs(pairs: &[TrainingPair], seed: u64) -> Result<Vec<TrainingPair>> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..pairs.len()).partition(|&i| pairs[i].is_positive());
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("training pairs need both positive and negative labels"));
    }
    let mut rng = io_util::derived_rng(seed, "balance");
    let (mut keep, mut major) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    major.shuffle(&mut rng);
    major.truncate(keep.len());
    keep.extend(major);
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| pairs[i].clone()).collect())
}

/// Stratified split into (train, validation).
pub fn split_validation(
    pairs: &[TrainingPair],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<TrainingPair>, Vec<TrainingPair>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("validation fraction must be in [0, 1)"));
    }
    let mut rng = io_util::derived_rng(seed, "validation-split");
    let mut val_idx = Vec::new();
    for label in [0u8, 1] {
        let mut idx: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].label == label).collect();
        idx.shuffle(&mut rng);
        let take = (idx.len() as f64 * fraction).ceil() as usize;
        val_idx.extend_from_slice(&idx[..take.min(idx.len())]);
    }
    val_idx.sort_unstable();
    let mut is_val = vec![false; pairs.len()];
    for &i in &val_idx {
        is_val[i] = true;
    }
    let (val, train): (Vec<_>, Vec<_>) = pairs
        .iter()
        .cloned()
        .zip(is_val)
        .partition(|(_, v)| *v);
    Ok((
        train.into_iter().map(|(p, _)| p).collect(),
        val.into_iter().map(|(p, _)| p).collect(),
    ))
}

/// Balance, split and train.
pub fn train(pairs: &[TrainingPair], model: BiEncoder, cfg: &EncoderTrainConfig) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let balanced = balance_pairs(pairs, cfg.batch.seed)?;
    let (tr, val) = split_validation(&balanced, cfg.val_fraction, cfg.batch.seed)?;
    train_with_validation(&tr, &val, model, cfg)
}

struct Encoded {
    profile: Vec<u32>,
    resume: Vec<u32>,
    doc: Vec<u32>,
    label: f64,
}

fn encode_pairs(model: &BiEncoder, pairs: &[TrainingPair]) -> Vec<Encoded> {
    pairs
        .iter()
        .map(|p| Encoded {
            profile: model.tokens(&p.profile()),
            resume: model.tokens(&p.resume()),
            doc: model.tokens(&p.document()),
            label: p.label as f64,
        })
        .collect()
}

fn embed_batch(
    model: &BiEncoder,
    g: &mut ValueGraph,
    train_encoder: bool,
    train_head: bool,
    items: &[&Encoded],
) -> Result<EmbeddedBatch> {
    let b = model.bind(g, train_encoder, train_head)?;
    let lists = |f: fn(&Encoded) -> &[u32]| items.iter().map(|e| f(e)).collect::<Vec<_>>();
    let profile = model.encode_tokens(g, &b, &lists(|e| &e.profile))?;
    let resume = model.encode_tokens(g, &b, &lists(|e| &e.resume))?;
    let document = model.encode_tokens(g, &b, &lists(|e| &e.doc))?;
    let prob = model.head(g, &b, profile, resume, document)?;
    Ok(EmbeddedBatch {
        profile,
        resume,
        document,
        prob,
        labels: items.iter().map(|e| e.label).collect(),
    })
}

fn predict(model: &BiEncoder, data: &[Encoded]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(256) {
        let mut g = ValueGraph::new();
        let items: Vec<&Encoded> = chunk.iter().collect();
        let batch = embed_batch(model, &mut g, false, false, &items)?;
        out.extend_from_slice(g.value(batch.prob).data());
    }
    Ok(out)
}

fn auc_of(model: &BiEncoder, data: &[Encoded]) -> Result<f64> {
    let scores = predict(model, data)?;
    let labels: Vec<bool> = data.iter().map(|e| e.label == 1.0).collect();
    compute_auc(&scores, &labels)
}

/// Validation AUC of the pairwise head's probabilities.
pub fn evaluate_auc(model: &BiEncoder, pairs: &[TrainingPair]) -> Result<f64> {
    auc_of(model, &encode_pairs(model, pairs))
}

pub fn train_with_validation(
    train_pairs: &[TrainingPair],
    val_pairs: &[TrainingPair],
    mut model: BiEncoder,
    cfg: &EncoderTrainConfig,
) -> Result<TrainOutcome> {
    if train_pairs.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    cfg.batch.validate()?;
    cfg.loss.validate()?;
    if !(cfg.eval_every > 0.0) {
        return Err(Error::invalid("eval_every must be positive"));
    }
    let train_data = encode_pairs(&model, train_pairs);
    let val_data = encode_pairs(&model, val_pairs);
    let train_encoder = cfg.mode == TrainMode::Full;

    let per_batch = cfg.batch.per_worker_batch_size;
    let micro_per_step = cfg.batch.worker_count * cfg.batch.grad_accumulation_steps;
    let effective = cfg.batch.effective_batch_size();
    let steps_per_epoch = train_data.len().div_ceil(effective);
    let eval_interval = ((cfg.eval_every * steps_per_epoch as f64).round() as u64).max(1);
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;

    cfg.optimizer.validate()?;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = io_util::derived_rng(cfg.batch.seed, "encoder-shuffle");
    let mut trace = Vec::new();
    let mut best: Option<(f64, BTreeMap<String, Tensor>)> = None;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut step = 0u64;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut rng);
        for step_items in order.chunks(effective) {
            let micro: Vec<&[usize]> = step_items.chunks(per_batch).collect();
            debug_assert!(micro.len() <= micro_per_step);
            let mut grads = Grads::new();
            for idx in &micro {
                let items: Vec<&Encoded> = idx.iter().map(|&i| &train_data[i]).collect();
                let mut g = ValueGraph::new();
                let batch = embed_batch(&model, &mut g, train_encoder, true, &items)?;
                let parts = compute_loss(&mut g, &batch, &cfg.loss)?;
                g.backward(parts.total)?;
                loss_sum += g.value(parts.total).data()[0];
                loss_count += 1;
                accumulate_grads_scaled(&mut grads, &g.param_grads(), 1.0 / micro.len() as f64);
            }
            opt.step(model.params_mut(), &grads)
                .map_err(|e| Error::Diverged(format!("step {}: {e}", step + 1)))?;
            step += 1;
            if (step % eval_interval == 0 || step == total_steps) && !val_data.is_empty() {
                let auc = auc_of(&model, &val_data)?;
                trace.push(AucCheck {
                    step,
                    epoch: step as f64 / steps_per_epoch as f64,
                    val_auc: auc,
                    train_loss: loss_sum / loss_count.max(1) as f64,
                });
                log::debug!("encoder step {step}: val auc {auc:.4}");
                loss_sum = 0.0;
                loss_count = 0;
                if best.as_ref().map_or(true, |(b, _)| auc > *b) {
                    best = Some((auc, model.params().clone()));
                }
            }
        }
    }

    let best_auc = match best {
        Some((auc, params)) => {
            *model.params_mut() = params;
            auc
        }
        None => f64::NAN,
    };
    Ok(TrainOutcome {
        model,
        trace,
        best_auc,
        effective_batch_size: effective,
        train_size: train_pairs.len(),
        val_size: val_pairs.len(),
    })
}

/// Records the full objective for `pairs` with every parameter trainable.
/// Used for gradient checks and loss inspection.
pub fn loss_graph(
    model: &BiEncoder,
    pairs: &[TrainingPair],
    cfg: &LossConfig,
) -> Result<(ValueGraph, super::LossParts)> {
    let data = encode_pairs(model, pairs);
    let items: Vec<&Encoded> = data.iter().collect();
    let mut g = ValueGraph::new();
    let batch = embed_batch(model, &mut g, true, true, &items)?;
    let parts = compute_loss(&mut g, &batch, cfg)?;
    Ok((g, parts))
}
