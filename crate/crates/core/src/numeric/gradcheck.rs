//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever calls [`ValueGraph::forward`], so it is
//! independent of the backward pass it checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numeric::graph::{BatchNormMode, NodeId, RunningStats, ValueGraph};
use crate::numeric::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
/// Smallest step tried when shrinking away from a kink.
pub const MIN_STEP: f64 = 1e-8;
/// Largest relative gap between the `h` and `h/2` estimates accepted
/// without shrinking the step. The gap overstates the error of the `h/2`
/// estimate about fifteenfold, and it must stay above the stencil's own
/// round-off at the base step.
pub const AGREE_TOL: f64 = REL_TOL / 10.0;
pub const REL_TOL: f64 = 1e-5;
/// Denominator floor for the relative error so that near-zero gradients are
/// compared on an absolute scale instead of amplifying round-off.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (leaf position, element, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Times an entry was re-estimated at a tenth of the step, after a kink
    /// crossing or disagreement between the two step sizes.
    pub step_shrinks: usize,
    /// Entries that crossed a kink at every step down to [`MIN_STEP`].
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.step_shrinks += other.step_shrinks;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare `d loss / d leaf` for every element of every leaf in `leaves`
/// against the fourth-order central difference
/// `D(h) = (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
///
/// Each entry is estimated at both `h` and `h/2`. Their gap bounds the
/// truncation error, so a gap above [`AGREE_TOL`] (relative) divides the
/// step by ten and tries again. The same happens when a probe moves any
/// leaky-ReLU or clamp input across its kink, since such a probe is not
/// measuring the derivative at `x`. If no step down to [`MIN_STEP`] agrees,
/// the smooth estimate with the smallest gap is used; an entry that never
/// had one is counted in `skipped` instead of `checked`.
pub fn check(graph: &mut ValueGraph, loss: NodeId, leaves: &[NodeId], h: f64) -> Result<GradCheckReport> {
    graph.forward()?;
    let base_sig = graph.branch_signature();
    graph.zero_grad();
    graph.backward(loss)?;
    let analytic: Vec<_> = leaves
        .iter()
        .map(|&id| {
            graph
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
        })
        .collect();
    let mut report = GradCheckReport::default();
    for (pos, &leaf) in leaves.iter().enumerate() {
        let base = graph.value(leaf).clone();
        for e in 0..base.len() {
            let mut eval = |offset: f64| -> Result<Option<f64>> {
                let mut probe = base.clone();
                probe.data_mut()[e] += offset;
                graph.set_value(leaf, probe)?;
                graph.forward()?;
                let f = graph.value(loss).data()[0];
                Ok((graph.branch_signature() == base_sig).then_some(f))
            };
            let mut step = h;
            let mut estimate: Option<(f64, f64)> = None;
            while step >= MIN_STEP {
                // Offsets in units of step/2: ±1, ±2, ±4.
                let mut f = [0.0; 6];
                let mut smooth = true;
                for (slot, k) in [4.0, 2.0, 1.0, -1.0, -2.0, -4.0].into_iter().enumerate() {
                    match eval(k * step / 2.0)? {
                        Some(v) => f[slot] = v,
                        None => {
                            smooth = false;
                            break;
                        }
                    }
                }
                if smooth {
                    let coarse = (-f[0] + 8.0 * f[1] - 8.0 * f[4] + f[5]) / (12.0 * step);
                    let fine = (-f[1] + 8.0 * f[2] - 8.0 * f[3] + f[4]) / (6.0 * step);
                    let gap = rel_error(coarse, fine);
                    if estimate.is_none_or(|(_, best)| gap < best) {
                        estimate = Some((fine, gap));
                    }
                    if gap <= AGREE_TOL {
                        break;
                    }
                }
                step /= 10.0;
                report.step_shrinks += 1;
            }
            let Some((numeric, _)) = estimate else {
                report.skipped += 1;
                continue;
            };
            let a = analytic[pos].data()[e];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pos, e, a, numeric));
            }
        }
        graph.set_value(leaf, base)?;
    }
    graph.forward()?;
    Ok(report)
}

/// Every differentiable op, as a builder over freshly drawn random leaves.
/// Each builder returns (graph, scalar loss, leaves to check).
type OpCase = (&'static str, fn(&mut ChaCha8Rng) -> Result<(ValueGraph, NodeId, Vec<NodeId>)>);

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=4))
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn positive_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

/// Reduce an arbitrary output to a scalar with random weights so every
/// output element receives a distinct upstream gradient.
fn weighted_sum(g: &mut ValueGraph, out: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let w = rand_t(rng, g.value(out).shape());
    let w = g.input(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn unary(
    rng: &mut ChaCha8Rng,
    positive: bool,
    f: impl Fn(&mut ValueGraph, NodeId) -> Result<NodeId>,
) -> Result<(ValueGraph, NodeId, Vec<NodeId>)> {
    let (r, c) = dims(rng);
    let mut g = ValueGraph::new();
    let x = if positive {
        positive_t(rng, &[r, c])
    } else {
        rand_t(rng, &[r, c])
    };
    let x = g.param("x", x);
    let y = f(&mut g, x)?;
    let loss = weighted_sum(&mut g, y, rng)?;
    Ok((g, loss, vec![x]))
}

fn binary_same(
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut ValueGraph, NodeId, NodeId) -> Result<NodeId>,
) -> Result<(ValueGraph, NodeId, Vec<NodeId>)> {
    let (r, c) = dims(rng);
    let mut g = ValueGraph::new();
    let a = g.param("a", rand_t(rng, &[r, c]));
    let b = g.param("b", rand_t(rng, &[r, c]));
    let y = f(&mut g, a, b)?;
    let loss = weighted_sum(&mut g, y, rng)?;
    Ok((g, loss, vec![a, b]))
}

fn broadcast_case(
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut ValueGraph, NodeId, NodeId) -> Result<NodeId>,
) -> Result<(ValueGraph, NodeId, Vec<NodeId>)> {
    let (r, c) = dims(rng);
    let bshape = match rng.random_range(0..3) {
        0 => vec![1, c],
        1 => vec![r, 1],
        _ => vec![1],
    };
    let mut g = ValueGraph::new();
    let a = g.param("a", rand_t(rng, &[r, c]));
    let b = g.param("b", rand_t(rng, &bshape));
    let y = f(&mut g, a, b)?;
    let loss = weighted_sum(&mut g, y, rng)?;
    Ok((g, loss, vec![a, b]))
}

fn segments(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Vec<usize> {
    (0..rows).map(|_| rng.random_range(0..n)).collect()
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", |rng| {
            let (m, k) = dims(rng);
            let n = rng.random_range(1..=4);
            let mut g = ValueGraph::new();
            let a = g.param("a", rand_t(rng, &[m, k]));
            let b = g.param("b", rand_t(rng, &[k, n]));
            let y = g.matmul(a, b)?;
            let loss = weighted_sum(&mut g, y, rng)?;
            Ok((g, loss, vec![a, b]))
        }),
        ("add", |rng| broadcast_case(rng, |g, a, b| g.add(a, b))),
        ("sub", |rng| broadcast_case(rng, |g, a, b| g.sub(a, b))),
        ("mul", |rng| broadcast_case(rng, |g, a, b| g.mul(a, b))),
        ("scale", |rng| unary(rng, false, |g, x| g.scale(x, -1.7))),
        ("add_scalar", |rng| unary(rng, false, |g, x| g.add_scalar(x, 0.3))),
        ("leaky_relu", |rng| unary(rng, false, |g, x| g.leaky_relu(x))),
        ("sigmoid", |rng| unary(rng, false, |g, x| g.sigmoid(x))),
        ("softmax_rows", |rng| unary(rng, false, |g, x| g.softmax_rows(x))),
        ("log", |rng| unary(rng, true, |g, x| g.log(x))),
        ("exp", |rng| unary(rng, false, |g, x| g.exp(x))),
        ("clamp", |rng| unary(rng, false, |g, x| g.clamp(x, -0.5, 0.5))),
        ("mean_all", |rng| unary(rng, false, |g, x| g.mean(x, None))),
        ("mean_axis0", |rng| unary(rng, false, |g, x| g.mean(x, Some(0)))),
        ("mean_axis1", |rng| unary(rng, false, |g, x| g.mean(x, Some(1)))),
        ("sum", |rng| unary(rng, false, |g, x| g.sum(x))),
        ("concat_axis0", |rng| {
            binary_same(rng, |g, a, b| g.concat(&[a, b], 0))
        }),
        ("concat_axis1", |rng| {
            binary_same(rng, |g, a, b| g.concat(&[a, b, a], 1))
        }),
        ("l2_normalize", |rng| unary(rng, false, |g, x| g.l2_normalize(x))),
        ("row_dot", |rng| binary_same(rng, |g, a, b| g.row_dot(a, b))),
        ("similarity", |rng| {
            let (n, k) = dims(rng);
            let m = rng.random_range(1..=4);
            let mut g = ValueGraph::new();
            let a = g.param("a", rand_t(rng, &[n, k]));
            let b = g.param("b", rand_t(rng, &[m, k]));
            let y = g.similarity(a, b)?;
            let loss = weighted_sum(&mut g, y, rng)?;
            Ok((g, loss, vec![a, b]))
        }),
        ("batch_norm_train", |rng| {
            let r = rng.random_range(2..=5);
            let c = rng.random_range(1..=3);
            let mut g = ValueGraph::new();
            let x = g.param("x", rand_t(rng, &[r, c]));
            let gamma = g.param("gamma", rand_t(rng, &[1, c]));
            let beta = g.param("beta", rand_t(rng, &[1, c]));
            let y = g.batch_norm(x, gamma, beta, BatchNormMode::Train, RunningStats::new(c))?;
            let loss = weighted_sum(&mut g, y, rng)?;
            Ok((g, loss, vec![x, gamma, beta]))
        }),
        ("batch_norm_eval", |rng| {
            let (r, c) = dims(rng);
            let running = RunningStats {
                mean: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
                var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
            };
            let mut g = ValueGraph::new();
            let x = g.param("x", rand_t(rng, &[r, c]));
            let gamma = g.param("gamma", rand_t(rng, &[1, c]));
            let beta = g.param("beta", rand_t(rng, &[1, c]));
            let y = g.batch_norm(x, gamma, beta, BatchNormMode::Eval, running)?;
            let loss = weighted_sum(&mut g, y, rng)?;
            Ok((g, loss, vec![x, gamma, beta]))
        }),
        ("gather_rows", |rng| {
            let (r, c) = dims(rng);
            let k = rng.random_range(1..=6);
            let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..r)).collect();
            let mut g = ValueGraph::new();
            let t = g.param("t", rand_t(rng, &[r, c]));
            let y = g.gather_rows(t, idx)?;
            let loss = weighted_sum(&mut g, y, rng)?;
            Ok((g, loss, vec![t]))
        }),
        ("segment_sum", |rng| {
            let (r, c) = dims(rng);
            let n = rng.random_range(1..=3);
            let seg = segments(rng, r, n);
            let mut g = ValueGraph::new();
            let x = g.param("x", rand_t(rng, &[r, c]));
            let y = g.segment_sum(x, seg, n)?;
            let loss = weighted_sum(&mut g, y, rng)?;
            Ok((g, loss, vec![x]))
        }),
        ("segment_mean", |rng| {
            let (r, c) = dims(rng);
            let n = rng.random_range(1..=3);
            let seg = segments(rng, r, n);
            let mut g = ValueGraph::new();
            let x = g.param("x", rand_t(rng, &[r, c]));
            let y = g.segment_mean(x, seg, n)?;
            let loss = weighted_sum(&mut g, y, rng)?;
            Ok((g, loss, vec![x]))
        }),
        ("segment_softmax", |rng| {
            let (r, c) = dims(rng);
            let n = rng.random_range(1..=3);
            let seg = segments(rng, r, n);
            let mut g = ValueGraph::new();
            let x = g.param("x", rand_t(rng, &[r, c]));
            let y = g.segment_softmax(x, seg, n)?;
            let loss = weighted_sum(&mut g, y, rng)?;
            Ok((g, loss, vec![x]))
        }),
        ("transpose", |rng| unary(rng, false, |g, x| g.transpose(x))),
        ("slice_cols", |rng| {
            let r = rng.random_range(1..=4);
            let c = rng.random_range(2..=5);
            let start = rng.random_range(0..c - 1);
            let end = rng.random_range(start + 1..=c);
            let mut g = ValueGraph::new();
            let x = g.param("x", rand_t(rng, &[r, c]));
            let y = g.slice_cols(x, start, end)?;
            let loss = weighted_sum(&mut g, y, rng)?;
            Ok((g, loss, vec![x]))
        }),
        ("mlp3", |rng| {
            // three dense layers with leaky-ReLU and a sigmoid head
            let n = rng.random_range(1..=4);
            let widths = [3, 4, 3, 1];
            let mut g = ValueGraph::new();
            let mut h = g.input(rand_t(rng, &[n, widths[0]]));
            let mut leaves = Vec::new();
            for l in 0..3 {
                let w = g.param(format!("w{l}"), rand_t(rng, &[widths[l], widths[l + 1]]));
                let b = g.param(format!("b{l}"), rand_t(rng, &[1, widths[l + 1]]));
                leaves.extend([w, b]);
                let z = g.matmul(h, w)?;
                let z = g.add(z, b)?;
                h = if l < 2 { g.leaky_relu(z)? } else { g.sigmoid(z)? };
            }
            let loss = g.mean(h, None)?;
            Ok((g, loss, leaves))
        }),
    ]
}

/// Run every op case `instances` times on fresh random inputs.
pub fn check_all_ops(instances: usize, seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = Vec::new();
    for (name, build) in op_cases() {
        let mut rng = crate::io_util::derived_rng(seed, name);
        let mut total = GradCheckReport::default();
        for _ in 0..instances {
            let (mut g, loss, leaves) = build(&mut rng)?;
            total.merge(&check(&mut g, loss, &leaves, FD_STEP)?);
        }
        out.push((name, total));
    }
    Ok(out)
}
