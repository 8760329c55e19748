//! Dense tensors, reverse-mode differentiation, AdamW and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use graph::{BatchNormMode, NodeId, RunningStats, ValueGraph};
pub use optim::{accumulate_grads, accumulate_grads_scaled, AdamW, AdamWConfig, Grads, Params, TrainConfig};
pub use tensor::Tensor;

use rand::Rng;

/// Glorot-style normal init for a `fan_in × fan_out` weight.
pub fn init_weight<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn(&[fan_in, fan_out], std, rng)
}

pub fn init_bias(width: usize) -> Tensor {
    Tensor::zeros(&[1, width])
}

/// Binds parameter `name` into `g`, as a trainable leaf or (when
/// `trainable` is false) as a constant.
pub fn bind(
    g: &mut ValueGraph,
    params: &Params,
    name: &str,
    trainable: bool,
) -> crate::Result<NodeId> {
    let t = params
        .get(name)
        .ok_or_else(|| crate::Error::NotFound(format!("parameter {name}")))?
        .clone();
    Ok(if trainable {
        g.param(name, t)
    } else {
        g.input(t)
    })
}
