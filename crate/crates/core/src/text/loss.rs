//! Composite objective: mean BCE over the batch plus a temperature-scaled
//! two-way softmax against a semi-hard in-batch negative, summed over
//! positive anchors and over both request components.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{NodeId, Tensor, ValueGraph};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            tau: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Most similar in-batch candidate that is still strictly less similar than
/// the positive. The anchor's own slot is never a candidate and ties go to
/// the lowest index.
pub fn mine_semi_hard(anchor: usize, sims: &[f64], positive_sim: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &s) in sims.iter().enumerate() {
        if j == anchor || !(s < positive_sim) {
            continue;
        }
        if best.map_or(true, |b| s > sims[b]) {
            best = Some(j);
        }
    }
    best
}

/// Graph handles for one embedded batch. Embeddings are `[B, d]`, `prob` is
/// `[B, 1]`; labels are 0 or 1.
pub struct EmbeddedBatch {
    pub profile: NodeId,
    pub resume: NodeId,
    pub document: NodeId,
    pub prob: NodeId,
    pub labels: Vec<f64>,
}

pub struct LossParts {
    pub total: NodeId,
    pub bce: NodeId,
    /// Sum of contrastive terms, absent when no anchor found a negative or
    /// when λ is zero.
    pub contrastive: Option<NodeId>,
    /// Number of (anchor, component) terms that found a semi-hard negative.
    pub mined: usize,
}

pub fn compute_loss(g: &mut ValueGraph, batch: &EmbeddedBatch, cfg: &LossConfig) -> Result<LossParts> {
    cfg.validate()?;
    let n = batch.labels.len();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if g.value(batch.prob).shape() != [n, 1] {
        return Err(Error::Shape {
            op: "compute_loss",
            lhs: g.value(batch.prob).shape().to_vec(),
            rhs: vec![n, 1],
        });
    }

    let y = g.input(Tensor::matrix(n, 1, batch.labels.clone())?);
    let not_y = g.input(Tensor::matrix(n, 1, batch.labels.iter().map(|v| 1.0 - v).collect())?);
    let p = g.clamp(batch.prob, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = g.log(p)?;
    let one_minus = g.scale(p, -1.0)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let log_q = g.log(one_minus)?;
    let a = g.mul(y, log_p)?;
    let b = g.mul(not_y, log_q)?;
    let ll = g.add(a, b)?;
    let ll = g.mean(ll, None)?;
    let bce = g.scale(ll, -1.0)?;

    if cfg.lambda == 0.0 {
        return Ok(LossParts {
            total: bce,
            bce,
            contrastive: None,
            mined: 0,
        });
    }

    let mut terms = Vec::new();
    let mut mined = 0;
    for component in [batch.profile, batch.resume] {
        let (anchors, negatives) = mine_component(g, component, batch.document, &batch.labels);
        if anchors.is_empty() {
            continue;
        }
        mined += anchors.len();
        let docs = g.gather_rows(batch.document, anchors.clone())?;
        let pos_req = g.gather_rows(component, anchors)?;
        let neg_req = g.gather_rows(component, negatives)?;
        let pos = g.row_dot(pos_req, docs)?;
        let neg = g.row_dot(neg_req, docs)?;
        let logits = g.concat(&[pos, neg], 1)?;
        let logits = g.scale(logits, 1.0 / cfg.tau)?;
        let sm = g.softmax_rows(logits)?;
        let log_sm = g.log(sm)?;
        let first = g.slice_cols(log_sm, 0, 1)?;
        terms.push(g.sum(first)?);
    }
    if terms.is_empty() {
        return Ok(LossParts {
            total: bce,
            bce,
            contrastive: None,
            mined,
        });
    }
    let mut lc = terms[0];
    for &t in &terms[1..] {
        lc = g.add(lc, t)?;
    }
    let lc = g.scale(lc, -1.0)?;
    let weighted = g.scale(lc, cfg.lambda)?;
    let total = g.add(bce, weighted)?;
    Ok(LossParts {
        total,
        bce,
        contrastive: Some(lc),
        mined,
    })
}

/// Positive anchors and their mined negatives for one request component.
fn mine_component(
    g: &ValueGraph,
    requests: NodeId,
    docs: NodeId,
    labels: &[f64],
) -> (Vec<usize>, Vec<usize>) {
    let r = g.value(requests);
    let d = g.value(docs);
    let n = labels.len();
    let mut anchors = Vec::new();
    let mut negatives = Vec::new();
    let mut row = vec![0.0; n];
    for i in (0..n).filter(|&i| labels[i] == 1.0) {
        let di = d.row(i);
        for (j, s) in row.iter_mut().enumerate() {
            *s = r.row(j).iter().zip(di).map(|(a, b)| a * b).sum();
        }
        if let Some(neg) = mine_semi_hard(i, &row, row[i]) {
            anchors.push(i);
            negatives.push(neg);
        }
    }
    (anchors, negatives)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mining_examples() {
        assert_eq!(mine_semi_hard(0, &[0.9, 0.7, 0.95, 0.6], 0.9), Some(1));
        assert_eq!(mine_semi_hard(0, &[0.5, 0.8, 0.9], 0.5), None);
        assert_eq!(mine_semi_hard(0, &[0.9, 0.7, 0.7], 0.9), Some(1));
        assert_eq!(mine_semi_hard(0, &[0.9], 0.9), None);
    }

    #[test]
    fn equal_to_positive_is_not_semi_hard() {
        assert_eq!(mine_semi_hard(1, &[0.4, 0.4, 0.3], 0.4), Some(2));
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let mut g = ValueGraph::new();
        let e = g.input(Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap());
        let prob = g.input(Tensor::matrix(1, 1, vec![0.5]).unwrap());
        let batch = EmbeddedBatch {
            profile: e,
            resume: e,
            document: e,
            prob,
            labels: vec![1.0],
        };
        let cfg = LossConfig { lambda: 0.0, tau: 0.1 };
        let parts = compute_loss(&mut g, &batch, &cfg).unwrap();
        assert!((g.value(parts.total).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let bad = LossConfig { lambda: 0.5, tau: 0.0 };
        assert!(compute_loss(&mut g, &batch, &bad).is_err());
    }
}
