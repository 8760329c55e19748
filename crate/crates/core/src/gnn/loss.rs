use super::MultiTaskConfig;
use crate::error::{Error, Result};
use crate::numeric::{NodeId, Tensor, ValueGraph};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the log.
pub const PROB_EPS: f64 = 1e-12;

/// Link logit: the dot product of the two tower outputs.
pub fn score(src: &[f64], dst: &[f64]) -> Result<f64> {
    if src.len() != dst.len() {
        return Err(Error::Shape {
            op: "score",
            lhs: vec![src.len()],
            rhs: vec![dst.len()],
        });
    }
    Ok(src.iter().zip(dst).map(|(a, b)| a * b).sum())
}

/// Mean binary cross-entropy of `sigmoid(logit)` against labels.
pub fn task_loss(logits: &[f64], labels: &[bool]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::invalid("task loss over an empty pair set"));
    }
    if logits.len() != labels.len() {
        return Err(Error::invalid("logits and labels differ in length"));
    }
    let mut s = 0.0;
    for (&z, &y) in logits.iter().zip(labels) {
        let p = (1.0 / (1.0 + (-z).exp())).clamp(PROB_EPS, 1.0 - PROB_EPS);
        s += if y { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(-s / logits.len() as f64)
}

/// Graph version of [`task_loss`] for logits `[P, 1]`.
pub fn task_loss_node(g: &mut ValueGraph, logits: NodeId, labels: &[bool]) -> Result<NodeId> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::invalid("task loss over an empty pair set"));
    }
    let y: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let y = g.input(Tensor::matrix(n, 1, y)?);
    let not_y = g.input(Tensor::matrix(n, 1, not_y)?);
    let p = g.sigmoid(logits)?;
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let lp = g.log(p)?;
    let q = g.scale(p, -1.0)?;
    let q = g.add_scalar(q, 1.0)?;
    let lq = g.log(q)?;
    let a = g.mul(y, lp)?;
    let b = g.mul(not_y, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s, None)?;
    g.scale(m, -1.0)
}

/// `Σ λᵢ Lᵢ`; tasks with zero weight are left out entirely.
pub fn multi_task_loss(cfg: &MultiTaskConfig, per_task: &[f64]) -> Result<f64> {
    if per_task.len() != cfg.tasks.len() {
        return Err(Error::invalid(format!(
            "{} task losses for {} tasks",
            per_task.len(),
            cfg.tasks.len()
        )));
    }
    Ok(cfg
        .tasks
        .iter()
        .zip(per_task)
        .filter(|(t, _)| t.lambda != 0.0)
        .map(|(t, l)| t.lambda * l)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::LinkTask;
    use crate::graph::NodeType;

    #[test]
    fn score_examples() {
        assert_eq!(score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn single_pair_at_zero_logit() {
        let l = task_loss(&[0.0], &[true]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(task_loss(&[], &[]).is_err());
        assert!(task_loss(&[800.0, -800.0], &[true, false]).unwrap() < 1e-11);
    }

    #[test]
    fn weighted_sums() {
        let t = |l| LinkTask::new("t", "member-job-APPLY", NodeType::Member, NodeType::Job, l);
        let cfg = MultiTaskConfig { tasks: vec![t(0.5), t(0.5), t(1.0)] };
        assert!((multi_task_loss(&cfg, &[0.2, 0.4, 0.1]).unwrap() - 0.4).abs() < 1e-15);
        let cfg = MultiTaskConfig { tasks: vec![t(1.0), t(0.0), t(0.0)] };
        assert_eq!(multi_task_loss(&cfg, &[0.7, f64::NAN, 3.0]).unwrap(), 0.7);
        let cfg = MultiTaskConfig { tasks: vec![t(0.0), t(0.0)] };
        assert_eq!(multi_task_loss(&cfg, &[0.7, 0.2]).unwrap(), 0.0);
    }
}
