use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index;

use crate::error::{Error, Result};
use crate::io_util;
use crate::numeric::{checkpoint, Tensor};

/// Ridge added to the diagonal of the normal equations.
pub const RIDGE: f64 = 1e-8;

/// Linear map from version `from_version` (dim m) back to `to_version`
/// (dim n). No bias term.
#[derive(Clone, Debug, PartialEq)]
pub struct VersionTransform {
    pub from_version: u32,
    pub to_version: u32,
    /// `n × m`.
    pub weight: Tensor,
    pub residual_rms: f64,
    pub fit_rows: usize,
}

impl VersionTransform {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Maps every row of `rows` (`N × m`) to the old space.
    pub fn apply_rows(&self, rows: &Tensor) -> Result<Tensor> {
        if rows.rank() != 2 || rows.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "apply_transform",
                lhs: self.weight.shape().to_vec(),
                rhs: rows.shape().to_vec(),
            });
        }
        rows.matmul(&self.weight.transpose())
    }

    pub fn to_entries(&self) -> BTreeMap<String, Tensor> {
        BTreeMap::from([
            ("weight".to_owned(), self.weight.clone()),
            ("config.from_version".to_owned(), Tensor::scalar(self.from_version as f64)),
            ("config.to_version".to_owned(), Tensor::scalar(self.to_version as f64)),
            ("config.residual_rms".to_owned(), Tensor::scalar(self.residual_rms)),
            ("config.fit_rows".to_owned(), Tensor::scalar(self.fit_rows as f64)),
        ])
    }

    pub fn from_entries(mut e: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut scalar = |k: &str| -> Result<f64> {
            e.remove(k)
                .and_then(|t| t.item())
                .ok_or_else(|| Error::Format {
                    what: "transform checkpoint",
                    message: format!("missing scalar {k}"),
                })
        };
        let from_version = scalar("config.from_version")? as u32;
        let to_version = scalar("config.to_version")? as u32;
        let residual_rms = scalar("config.residual_rms")?;
        let fit_rows = scalar("config.fit_rows")? as usize;
        let weight = e.remove("weight").filter(|w| w.rank() == 2).ok_or_else(|| Error::Format {
            what: "transform checkpoint",
            message: "missing 2-d weight".into(),
        })?;
        Ok(Self {
            from_version,
            to_version,
            weight,
            residual_rms,
            fit_rows,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub ridge: f64,
    /// Fit on a seeded random subset of this many rows.
    pub sample_rows: Option<usize>,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            ridge: RIDGE,
            sample_rows: None,
            seed: 0,
        }
    }
}

/// Least-squares `W` minimizing `Σᵢ ‖W·new[i] − prev[i]‖²` on all rows.
pub fn fit_backward_transform(
    new: &Tensor,
    prev: &Tensor,
    from_version: u32,
    to_version: u32,
) -> Result<VersionTransform> {
    fit_with(new, prev, from_version, to_version, &FitOptions::default())
}

pub fn fit_with(
    new: &Tensor,
    prev: &Tensor,
    from_version: u32,
    to_version: u32,
    opts: &FitOptions,
) -> Result<VersionTransform> {
    if new.rank() != 2 || prev.rank() != 2 {
        return Err(Error::invalid("embedding matrices must be 2-d"));
    }
    if new.rows() != prev.rows() {
        return Err(Error::invalid(format!(
            "row count mismatch: {} new rows vs {} previous rows",
            new.rows(),
            prev.rows()
        )));
    }
    if !(opts.ridge >= 0.0) {
        return Err(Error::invalid("ridge must be non-negative"));
    }
    let rows: Vec<usize> = match opts.sample_rows {
        Some(k) if k < new.rows() => {
            let mut rng = io_util::derived_rng(opts.seed, "compat-rows");
            let mut r = index::sample(&mut rng, new.rows(), k).into_vec();
            r.sort_unstable();
            r
        }
        _ => (0..new.rows()).collect(),
    };
    let (m, n) = (new.cols(), prev.cols());
    if rows.len() < m {
        return Err(Error::invalid(format!(
            "underdetermined fit: {} rows for {m} input dims",
            rows.len()
        )));
    }
    let x = DMatrix::from_fn(rows.len(), m, |i, j| new.get(rows[i], j));
    let y = DMatrix::from_fn(rows.len(), n, |i, j| prev.get(rows[i], j));
    let mut xtx = x.tr_mul(&x);
    for d in 0..m {
        xtx[(d, d)] += opts.ridge;
    }
    let xty = x.tr_mul(&y);
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::invalid("normal equations are not positive definite; raise the ridge"))?;
    // Solution is Wᵀ (m × n).
    let wt = chol.solve(&xty);
    let weight = Tensor::matrix(n, m, (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| wt[(j, i)]).collect())?;
    let resid = &x * &wt - &y;
    let residual_rms = (resid.norm_squared() / (rows.len() * n) as f64).sqrt();
    if !weight.is_finite() {
        return Err(Error::NonFinite("fit_backward_transform"));
    }
    Ok(VersionTransform {
        from_version,
        to_version,
        weight,
        residual_rms,
        fit_rows: rows.len(),
    })
}

/// `Σᵢ ‖W·new[i] − prev[i]‖²`.
pub fn fit_loss(weight: &Tensor, new: &Tensor, prev: &Tensor) -> Result<f64> {
    let mapped = new.matmul(&weight.transpose())?;
    if mapped.shape() != prev.shape() {
        return Err(Error::Shape {
            op: "fit_loss",
            lhs: mapped.shape().to_vec(),
            rhs: prev.shape().to_vec(),
        });
    }
    Ok(mapped.data().iter().zip(prev.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `W·v`.
pub fn apply_transform(t: &VersionTransform, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != t.input_dim() {
        return Err(Error::Shape {
            op: "apply_transform",
            lhs: t.weight.shape().to_vec(),
            rhs: vec![v.len()],
        });
    }
    Ok((0..t.output_dim())
        .map(|i| t.weight.row(i).iter().zip(v).map(|(w, x)| w * x).sum())
        .collect())
}

/// Chains `k → j` then `j → i` into one `k → i` map.
pub fn compose(first: &VersionTransform, second: &VersionTransform) -> Result<VersionTransform> {
    if first.to_version != second.from_version {
        return Err(Error::invalid(format!(
            "cannot chain {}→{} with {}→{}",
            first.from_version, first.to_version, second.from_version, second.to_version
        )));
    }
    Ok(VersionTransform {
        from_version: first.from_version,
        to_version: second.to_version,
        weight: second.weight.matmul(&first.weight)?,
        residual_rms: f64::NAN,
        fit_rows: 0,
    })
}
