use serde::{Deserialize, Serialize};

use super::VersionTransform;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompatReport {
    /// RMS of `transform(new) − prev` over the candidate rows.
    pub residual_rms: f64,
    /// Mean Kendall τ-b over probes with a defined τ.
    pub mean_tau: Option<f64>,
    pub min_tau: Option<f64>,
    pub probes: usize,
    pub candidates: usize,
    /// Probes where either ranking is constant, so τ is undefined.
    pub degenerate: usize,
}

/// Kendall τ-b between two score lists; `None` when either side is
/// constant.
pub fn kendall_tau_b(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "kendall_tau_b needs equal lengths");
    let (mut conc, mut disc, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            match (da == 0.0, db == 0.0) {
                (true, true) => {}
                (true, false) => ties_a += 1,
                (false, true) => ties_b += 1,
                (false, false) => {
                    if (da > 0.0) == (db > 0.0) {
                        conc += 1
                    } else {
                        disc += 1
                    }
                }
            }
        }
    }
    let n_a = (conc + disc + ties_a) as f64;
    let n_b = (conc + disc + ties_b) as f64;
    if n_a == 0.0 || n_b == 0.0 {
        return None;
    }
    Some((conc - disc) as f64 / (n_a * n_b).sqrt())
}

/// Ranks `candidates` (row indices into both stores) by dot product with
/// each probe, once with the old embeddings and once with the transformed
/// new ones, and compares the rankings.
pub fn evaluate_compat(
    t: &VersionTransform,
    new: &Tensor,
    prev: &Tensor,
    probes: &Tensor,
    candidates: &[usize],
) -> Result<CompatReport> {
    if probes.rank() != 2 || probes.rows() == 0 {
        return Err(Error::invalid("compat evaluation needs at least one probe"));
    }
    if candidates.len() < 2 {
        return Err(Error::invalid("compat evaluation needs at least two candidates"));
    }
    if new.rows() != prev.rows() || candidates.iter().any(|&c| c >= new.rows()) {
        return Err(Error::invalid("candidate rows out of range or stores misaligned"));
    }
    if probes.cols() != prev.cols() {
        return Err(Error::Shape {
            op: "evaluate_compat",
            lhs: probes.shape().to_vec(),
            rhs: prev.shape().to_vec(),
        });
    }
    let mapped = t.apply_rows(new)?;
    let mut sq = 0.0;
    for &c in candidates {
        sq += mapped.row(c).iter().zip(prev.row(c)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let residual_rms = (sq / (candidates.len() * prev.cols()) as f64).sqrt();

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut taus = Vec::new();
    let mut degenerate = 0;
    for p in 0..probes.rows() {
        let q = probes.row(p);
        let old: Vec<f64> = candidates.iter().map(|&c| dot(prev.row(c), q)).collect();
        let via: Vec<f64> = candidates.iter().map(|&c| dot(mapped.row(c), q)).collect();
        match kendall_tau_b(&old, &via) {
            Some(tau) => taus.push(tau),
            None => degenerate += 1,
        }
    }
    let mean_tau = (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64);
    let min_tau = taus.iter().copied().reduce(f64::min);
    if degenerate > 0 {
        log::warn!("{degenerate} probes have constant scores; tau undefined");
    }
    Ok(CompatReport {
        residual_rms,
        mean_tau,
        min_tau,
        probes: probes.rows(),
        candidates: candidates.len(),
        degenerate,
    })
}
