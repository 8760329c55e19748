//! ROC AUC with exact pairwise semantics, computed through the rank sum.
//!
//! AUC is the probability that a random positive outscores a random
//! negative, ties counting one half. Sorting once and assigning average
//! ranks to tie groups gives the Mann-Whitney U statistic, whose numerator
//! is a half-integer and therefore exact in `f64` for any realistic size.

use crate::error::{Error, Result};

pub fn compute_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "auc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("auc: NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(
            "auc needs at least one positive and one negative",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    let u = rank_sum - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(u / (n_pos_f * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        assert_eq!(compute_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(compute_auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
    }

    #[test]
    fn all_ties_give_half() {
        let labels = [true, false, true, false, false];
        assert_eq!(compute_auc(&[0.3; 5], &labels).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(compute_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(compute_auc(&[], &[]).is_err());
    }

    #[test]
    fn negative_zero_ties_with_zero() {
        assert_eq!(compute_auc(&[0.0, -0.0], &[true, false]).unwrap(), 0.5);
    }
}
