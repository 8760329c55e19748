//! AdamW with linear warmup, parameter stores and batch-size bookkeeping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

/// Named trainable tensors.
pub type Params = BTreeMap<String, Tensor>;

/// Named gradients, one per parameter that received any.
pub type Grads = BTreeMap<String, Tensor>;

/// Adds `src` into `acc`, creating entries as needed.
pub fn accumulate_grads(acc: &mut Grads, src: &Grads) {
    for (name, g) in src {
        match acc.get_mut(name) {
            Some(a) => a.add_assign(g),
            None => {
                acc.insert(name.clone(), g.clone());
            }
        }
    }
}

/// Adds `scale * src` into `acc`.
pub fn accumulate_grads_scaled(acc: &mut Grads, src: &Grads, scale: f64) {
    for (name, g) in src {
        match acc.get_mut(name) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += scale * y;
                }
            }
            None => {
                acc.insert(name.clone(), g.map(|v| v * scale));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 30,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::invalid(format!("bad optimizer settings: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Learning rate used by update number `t` (1-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.cfg.warmup_steps == 0 || t >= self.cfg.warmup_steps {
            self.cfg.lr
        } else {
            self.cfg.lr * t as f64 / self.cfg.warmup_steps as f64
        }
    }

    /// One decoupled-weight-decay Adam update. Parameters without a gradient
    /// are left alone. A non-finite gradient aborts before any state changes.
    pub fn step(&mut self, params: &mut Params, grads: &Grads) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite("optimizer gradient"));
            }
            let p = params
                .get(name)
                .ok_or_else(|| Error::NotFound(format!("parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let t = self.t;
        let lr = self.lr_at(t);
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}

/// Batch shape of a training run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub per_worker_batch_size: usize,
    pub grad_accumulation_steps: usize,
    /// Only scales the bookkeeping; execution is always single-process.
    pub worker_count: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            per_worker_batch_size: 16,
            grad_accumulation_steps: 8,
            worker_count: 1,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch_size(&self) -> usize {
        self.worker_count * self.per_worker_batch_size * self.grad_accumulation_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_worker_batch_size == 0
            || self.grad_accumulation_steps == 0
            || self.worker_count == 0
        {
            return Err(Error::invalid(
                "batch size, accumulation steps and worker count must all be positive",
            ));
        }
        Ok(())
    }
}
