use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureBundle, HeteroGraph, NodeRef};
use crate::error::{Error, Result};
use crate::io_util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Random,
    Temporal,
    Ppr,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "temporal" => Ok(Self::Temporal),
            "ppr" => Ok(Self::Ppr),
            _ => Err(Error::invalid(format!(
                "unknown sampling strategy {s:?} (random, temporal, ppr)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: SamplingStrategy,
    pub fanout: usize,
    pub seed: u64,
    pub ppr_top_k: usize,
    pub ppr_iterations: usize,
    pub ppr_teleport: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: SamplingStrategy::Random,
            fanout: 10,
            seed: 0,
            ppr_top_k: 50,
            ppr_iterations: 5,
            ppr_teleport: 0.15,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fanout == 0 {
            return Err(Error::invalid("fanout must be at least 1"));
        }
        if !(self.ppr_teleport > 0.0 && self.ppr_teleport < 1.0) {
            return Err(Error::invalid("ppr_teleport must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Edge-type id attached to neighbors chosen by PPR, which are not
/// necessarily adjacent to the seed.
pub const PPR_EDGE_TYPE: usize = usize::MAX;

/// Unordered node pairs whose edges are hidden from sampling, so
/// supervision edges do not leak into message passing.
#[derive(Clone, Debug, Default)]
pub struct EdgeMask {
    pairs: HashSet<(u32, u32)>,
}

impl EdgeMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: usize, b: usize) {
        let (a, b) = (a.min(b) as u32, a.max(b) as u32);
        self.pairs.insert((a, b));
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.pairs.contains(&(a.min(b) as u32, a.max(b) as u32))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Neighbor sampler owning its random stream.
#[derive(Clone, Debug)]
pub struct Sampler {
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = io_util::derived_rng(cfg.seed, "neighbor-sampler");
        Ok(Self { cfg, rng })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// Up to `count` neighbors of `node` over `edge_types` as
    /// `(neighbor, edge_type)`. When the pooled degree is at most `count`,
    /// every neighbor entry is returned once.
    pub fn sample_neighbors(
        &mut self,
        g: &HeteroGraph,
        node: usize,
        edge_types: &[usize],
        count: usize,
    ) -> Result<Vec<(usize, usize)>> {
        self.sample_masked(g, node, edge_types, count, None)
    }

    /// [`Self::sample_neighbors`] addressed by node reference and edge type names.
    pub fn sample_by_name(
        &mut self,
        g: &HeteroGraph,
        node: NodeRef,
        edge_types: &[&str],
        count: usize,
    ) -> Result<Vec<(NodeRef, String)>> {
        let idx = g.require(node)?;
        let ets = edge_types
            .iter()
            .map(|n| g.edge_type_id(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .sample_neighbors(g, idx, &ets, count)?
            .into_iter()
            .map(|(n, et)| {
                let name = if et == PPR_EDGE_TYPE {
                    "ppr".to_owned()
                } else {
                    g.edge_types()[et].name.clone()
                };
                (g.node(n), name)
            })
            .collect())
    }

    pub fn sample_masked(
        &mut self,
        g: &HeteroGraph,
        node: usize,
        edge_types: &[usize],
        count: usize,
        mask: Option<&EdgeMask>,
    ) -> Result<Vec<(usize, usize)>> {
        if node >= g.node_count() {
            return Err(Error::NotFound(format!("node index {node}")));
        }
        if let Some(&bad) = edge_types.iter().find(|&&e| e >= g.edge_types().len()) {
            return Err(Error::invalid(format!("unknown edge type id {bad}")));
        }
        if count == 0 {
            return Ok(Vec::new());
        }
        let hidden = |v: usize| mask.is_some_and(|m| m.contains(node, v));

        if self.cfg.strategy == SamplingStrategy::Ppr {
            let scores = ppr_scores(g, node, self.cfg.ppr_iterations, self.cfg.ppr_teleport)?;
            let mut ranked: Vec<(usize, f64)> = scores
                .into_iter()
                .filter(|&(v, s)| v != node && s > 0.0 && !hidden(v))
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(count.min(self.cfg.ppr_top_k));
            return Ok(ranked.into_iter().map(|(v, _)| (v, PPR_EDGE_TYPE)).collect());
        }

        let mut cand: Vec<(usize, usize, i64)> = Vec::new();
        for &et in edge_types {
            let nb = g.neighbors(node, et);
            for i in 0..nb.len() {
                let v = nb.nodes[i] as usize;
                if !hidden(v) {
                    cand.push((v, et, nb.timestamps[i]));
                }
            }
        }
        if cand.len() <= count {
            return Ok(cand.into_iter().map(|(v, et, _)| (v, et)).collect());
        }
        match self.cfg.strategy {
            SamplingStrategy::Random => {
                let mut picked = index::sample(&mut self.rng, cand.len(), count).into_vec();
                picked.sort_unstable();
                Ok(picked.into_iter().map(|i| (cand[i].0, cand[i].1)).collect())
            }
            SamplingStrategy::Temporal => {
                cand.sort_by(|a, b| b.2.cmp(&a.2));
                Ok(cand.into_iter().take(count).map(|(v, et, _)| (v, et)).collect())
            }
            SamplingStrategy::Ppr => unreachable!(),
        }
    }
}

/// Personalized PageRank from `seed` on the type-collapsed graph:
/// `p ← t·e_seed + (1−t)·Aᵀ_norm·p`, starting from `e_seed`, for
/// `iterations` rounds. Mass on nodes without neighbors returns to the seed,
/// so scores always sum to one.
pub fn ppr_scores(
    g: &HeteroGraph,
    seed: usize,
    iterations: usize,
    teleport: f64,
) -> Result<BTreeMap<usize, f64>> {
    if seed >= g.node_count() {
        return Err(Error::NotFound(format!("node index {seed}")));
    }
    if !(teleport > 0.0 && teleport <= 1.0) {
        return Err(Error::invalid("teleport must lie in (0, 1]"));
    }
    let mut p = BTreeMap::from([(seed, 1.0)]);
    if g.all_neighbors(seed).is_empty() {
        return Ok(p);
    }
    let walk = 1.0 - teleport;
    for _ in 0..iterations {
        let mut next = BTreeMap::from([(seed, teleport)]);
        let mut dangling = 0.0;
        for (&u, &pu) in &p {
            let nbrs = g.all_neighbors(u);
            if nbrs.is_empty() {
                dangling += pu;
                continue;
            }
            let share = walk * pu / nbrs.len() as f64;
            if share == 0.0 {
                continue;
            }
            for &v in nbrs {
                *next.entry(v as usize).or_insert(0.0) += share;
            }
        }
        *next.get_mut(&seed).unwrap() += walk * dangling;
        p = next;
    }
    Ok(p)
}

/// Sampled message edges of one hop, as rows of [`SubgraphBatch::nodes`].
/// Messages flow from `src` (the sampled neighbor) to `dst`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HopEdges {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub edge_type: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphBatch {
    /// Unique graph node indices; seeds come first.
    pub nodes: Vec<usize>,
    /// Row in `nodes` of each requested seed, in request order.
    pub seed_rows: Vec<usize>,
    pub hops: Vec<HopEdges>,
    /// Total sampled edges over all hops (the sampling cost meter).
    pub sampled_edges: usize,
}

impl SubgraphBatch {
    pub fn features<'a>(&self, g: &'a HeteroGraph) -> Vec<&'a FeatureBundle> {
        self.nodes.iter().map(|&n| g.features(n)).collect()
    }

    /// All hops' edges concatenated as (src rows, dst rows).
    pub fn all_edges(&self) -> (Vec<usize>, Vec<usize>) {
        let mut s = Vec::with_capacity(self.sampled_edges);
        let mut d = Vec::with_capacity(self.sampled_edges);
        for h in &self.hops {
            s.extend_from_slice(&h.src);
            d.extend_from_slice(&h.dst);
        }
        (s, d)
    }
}

/// Layered neighborhood around `seeds`. Hop `h` expands the nodes first
/// reached at hop `h − 1` (the seeds for hop 0); each node is expanded at
/// most once and appears once in the node list.
pub fn subgraph_batch(
    g: &HeteroGraph,
    seeds: &[usize],
    fanouts: &[usize],
    sampler: &mut Sampler,
    edge_types: &[usize],
    mask: Option<&EdgeMask>,
) -> Result<SubgraphBatch> {
    let mut nodes = Vec::new();
    let mut row_of: HashMap<usize, usize> = HashMap::new();
    fn row(n: usize, nodes: &mut Vec<usize>, row_of: &mut HashMap<usize, usize>) -> (usize, bool) {
        match row_of.get(&n) {
            Some(&r) => (r, false),
            None => {
                row_of.insert(n, nodes.len());
                nodes.push(n);
                (nodes.len() - 1, true)
            }
        }
    }
    let mut seed_rows = Vec::with_capacity(seeds.len());
    let mut frontier = Vec::new();
    for &s in seeds {
        if s >= g.node_count() {
            return Err(Error::NotFound(format!("seed node index {s}")));
        }
        let (r, fresh) = row(s, &mut nodes, &mut row_of);
        seed_rows.push(r);
        if fresh {
            frontier.push(s);
        }
    }
    let mut hops = Vec::with_capacity(fanouts.len());
    let mut sampled_edges = 0;
    for &fanout in fanouts {
        let mut hop = HopEdges::default();
        let mut next = Vec::new();
        for &u in &frontier {
            let du = row_of[&u];
            for (v, et) in sampler.sample_masked(g, u, edge_types, fanout, mask)? {
                let (dv, fresh) = row(v, &mut nodes, &mut row_of);
                if fresh {
                    next.push(v);
                }
                hop.src.push(dv);
                hop.dst.push(du);
                hop.edge_type.push(et);
            }
        }
        sampled_edges += hop.src.len();
        hops.push(hop);
        frontier = next;
    }
    Ok(SubgraphBatch {
        nodes,
        seed_rows,
        hops,
        sampled_edges,
    })
}
