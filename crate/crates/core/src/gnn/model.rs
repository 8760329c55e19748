use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GnnConfig, Pooling};
use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, SubgraphBatch};
use crate::io_util;
use crate::numeric::{
    self, bind, checkpoint, BatchNormMode, NodeId, Params, RunningStats, Tensor, ValueGraph,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tower {
    Source,
    Destination,
}

impl std::str::FromStr for Tower {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" | "src" => Ok(Tower::Source),
            "destination" | "dst" => Ok(Tower::Destination),
            _ => Err(Error::invalid(format!("unknown tower {s:?} (source, destination)"))),
        }
    }
}

/// Input feature geometry taken from the graph a model is built for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub text_dim: usize,
    pub id_slots: usize,
    /// Cardinality of each categorical feature id.
    pub categorical: Vec<usize>,
}

impl InputDims {
    pub fn from_graph(g: &HeteroGraph) -> Self {
        Self {
            text_dim: g.text_dim(),
            id_slots: g.id_slot_count(),
            categorical: g
                .categorical_cardinalities()
                .into_iter()
                .map(|c| c as usize)
                .collect(),
        }
    }

    fn cat_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.categorical.len());
        let mut acc = 0;
        for &c in &self.categorical {
            off.push(acc);
            acc += c;
        }
        off
    }

    fn cat_total(&self) -> usize {
        self.categorical.iter().sum()
    }
}

struct LayerIds {
    wq: Option<NodeId>,
    wk: Option<NodeId>,
    wv: NodeId,
    ws: NodeId,
    wo: NodeId,
    b: NodeId,
}

pub(crate) struct BoundTower {
    prefix: &'static str,
    proj: (NodeId, NodeId),
    layers: Vec<LayerIds>,
    bn: Option<(NodeId, NodeId)>,
    out: (NodeId, NodeId),
}

/// Model parameters bound into one graph.
pub(crate) struct Bound {
    towers: Vec<BoundTower>,
    id_table: Option<NodeId>,
    cat_table: Option<NodeId>,
    head_sum: Option<NodeId>,
    head_expand: Option<NodeId>,
}

/// Batch-norm node recorded during a training pass, keyed by tower prefix.
pub(crate) type BnRecord = (&'static str, NodeId);

#[derive(Clone, Debug, PartialEq)]
pub struct GnnModel {
    cfg: GnnConfig,
    dims: InputDims,
    params: Params,
    bn_state: BTreeMap<String, RunningStats>,
}

impl GnnModel {
    pub fn new(cfg: GnnConfig, dims: InputDims, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let in_dim = input_width(&cfg, &dims);
        if in_dim == 0 {
            return Err(Error::invalid("every node input source is disabled"));
        }
        let h = cfg.hidden();
        let mut rng = io_util::derived_rng(seed, "gnn-init");
        let mut params = Params::new();
        let mut bn_state = BTreeMap::new();
        for prefix in tower_prefixes(&cfg) {
            let mut w = |name: String, fan_in: usize, fan_out: usize, params: &mut Params| {
                params.insert(name, numeric::init_weight(fan_in, fan_out, &mut rng));
            };
            w(format!("{prefix}.proj.w"), in_dim, h, &mut params);
            params.insert(format!("{prefix}.proj.b"), numeric::init_bias(h));
            for l in 0..cfg.num_layers {
                let mut names = vec!["wv", "ws", "wo"];
                if cfg.pooling == Pooling::SelfAttention {
                    names.extend(["wq", "wk"]);
                }
                for n in names {
                    w(format!("{prefix}.l{l}.{n}"), h, h, &mut params);
                }
                params.insert(format!("{prefix}.l{l}.b"), numeric::init_bias(h));
            }
            if cfg.batch_norm {
                params.insert(format!("{prefix}.bn.gamma"), Tensor::filled(&[1, h], 1.0));
                params.insert(format!("{prefix}.bn.beta"), Tensor::zeros(&[1, h]));
                bn_state.insert(prefix.to_owned(), RunningStats::new(h));
            }
            w(format!("{prefix}.out.w"), h, cfg.embedding_dim, &mut params);
            params.insert(format!("{prefix}.out.b"), numeric::init_bias(cfg.embedding_dim));
        }
        if cfg.use_id {
            params.insert(
                "id_table".into(),
                Tensor::randn(&[dims.id_slots.max(1), cfg.id_dim], 0.1, &mut rng),
            );
        }
        if cfg.use_categorical {
            params.insert(
                "cat_table".into(),
                Tensor::randn(&[dims.cat_total().max(1), cfg.categorical_dim], 0.1, &mut rng),
            );
        }
        if cfg.dual_encoder && cfg.tied_init {
            let copies: Vec<(String, Tensor)> = params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("src.").map(|rest| (format!("dst.{rest}"), v.clone())))
                .collect();
            params.extend(copies);
        }
        Ok(Self {
            cfg,
            dims,
            params,
            bn_state,
        })
    }

    pub fn config(&self) -> &GnnConfig {
        &self.cfg
    }

    pub fn dims(&self) -> &InputDims {
        &self.dims
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub(crate) fn update_bn(&mut self, prefix: &str, batch: &RunningStats) {
        if let Some(s) = self.bn_state.get_mut(prefix) {
            s.update(batch);
        }
    }

    /// Parameters of one tower, keyed without the tower prefix.
    pub fn tower_params(&self, tower: Tower) -> BTreeMap<String, Tensor> {
        let prefix = format!("{}.", self.prefix(tower));
        self.params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|r| (r.to_owned(), v.clone())))
            .collect()
    }

    fn prefix(&self, tower: Tower) -> &'static str {
        match (self.cfg.dual_encoder, tower) {
            (false, _) => "shared",
            (true, Tower::Source) => "src",
            (true, Tower::Destination) => "dst",
        }
    }

    pub(crate) fn bind(&self, g: &mut ValueGraph, trainable: bool) -> Result<Bound> {
        let mut towers = Vec::new();
        for prefix in tower_prefixes(&self.cfg) {
            let mut p = |name: String| bind(g, &self.params, &name, trainable);
            let proj = (p(format!("{prefix}.proj.w"))?, p(format!("{prefix}.proj.b"))?);
            let mut layers = Vec::new();
            for l in 0..self.cfg.num_layers {
                let attn = self.cfg.pooling == Pooling::SelfAttention;
                layers.push(LayerIds {
                    wq: if attn { Some(p(format!("{prefix}.l{l}.wq"))?) } else { None },
                    wk: if attn { Some(p(format!("{prefix}.l{l}.wk"))?) } else { None },
                    wv: p(format!("{prefix}.l{l}.wv"))?,
                    ws: p(format!("{prefix}.l{l}.ws"))?,
                    wo: p(format!("{prefix}.l{l}.wo"))?,
                    b: p(format!("{prefix}.l{l}.b"))?,
                });
            }
            let bn = if self.cfg.batch_norm {
                Some((p(format!("{prefix}.bn.gamma"))?, p(format!("{prefix}.bn.beta"))?))
            } else {
                None
            };
            let out = (p(format!("{prefix}.out.w"))?, p(format!("{prefix}.out.b"))?);
            towers.push(BoundTower {
                prefix,
                proj,
                layers,
                bn,
                out,
            });
        }
        let id_table = if self.cfg.use_id {
            Some(bind(g, &self.params, "id_table", trainable)?)
        } else {
            None
        };
        let cat_table = if self.cfg.use_categorical {
            Some(bind(g, &self.params, "cat_table", trainable)?)
        } else {
            None
        };
        let (head_sum, head_expand) = if self.cfg.pooling == Pooling::SelfAttention {
            let (s, e) = head_matrices(self.cfg.hidden(), self.cfg.attention_heads);
            (Some(g.input(s)), Some(g.input(e)))
        } else {
            (None, None)
        };
        Ok(Bound {
            towers,
            id_table,
            cat_table,
            head_sum,
            head_expand,
        })
    }

    /// Node input rows `[n, in_dim]` for the batch's nodes.
    fn inputs(&self, g: &mut ValueGraph, b: &Bound, graph: &HeteroGraph, batch: &SubgraphBatch) -> Result<NodeId> {
        let n = batch.nodes.len();
        let mut parts = Vec::new();
        if self.cfg.use_text {
            let d = self.dims.text_dim;
            if graph.text_dim() != d && graph.text_dim() != 0 {
                return Err(Error::Shape {
                    op: "gnn text features",
                    lhs: vec![graph.text_dim()],
                    rhs: vec![d],
                });
            }
            if d > 0 {
                let mut data = vec![0.0; n * d];
                for (row, &node) in batch.nodes.iter().enumerate() {
                    if let Some(e) = &graph.features(node).text_embedding {
                        for (k, &v) in e.iter().enumerate() {
                            data[row * d + k] = v as f64;
                        }
                    }
                }
                parts.push(g.input(Tensor::matrix(n, d, data)?));
            }
        }
        if let Some(table) = b.id_table {
            let (mut rows, mut slots) = (Vec::new(), Vec::new());
            for (row, &node) in batch.nodes.iter().enumerate() {
                if let Some(s) = graph.features(node).id_slot {
                    if (s as usize) < self.dims.id_slots {
                        rows.push(row);
                        slots.push(s as usize);
                    }
                }
            }
            parts.push(self.scatter(g, table, slots, rows, n, self.cfg.id_dim, false)?);
        }
        if let Some(table) = b.cat_table {
            let offsets = self.dims.cat_offsets();
            let (mut rows, mut idx) = (Vec::new(), Vec::new());
            for (row, &node) in batch.nodes.iter().enumerate() {
                for &(fid, vid) in &graph.features(node).categorical {
                    let (fid, vid) = (fid as usize, vid as usize);
                    if fid < offsets.len() && vid < self.dims.categorical[fid] {
                        rows.push(row);
                        idx.push(offsets[fid] + vid);
                    }
                }
            }
            parts.push(self.scatter(g, table, idx, rows, n, self.cfg.categorical_dim, true)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat(&parts, 1)
        }
    }

    /// Gathers `idx` rows of `table` and sums (or averages) them into `n`
    /// output rows given by `rows`; rows without entries are zero.
    #[allow(clippy::too_many_arguments)]
    fn scatter(
        &self,
        g: &mut ValueGraph,
        table: NodeId,
        idx: Vec<usize>,
        rows: Vec<usize>,
        n: usize,
        width: usize,
        mean: bool,
    ) -> Result<NodeId> {
        if idx.is_empty() {
            return Ok(g.input(Tensor::zeros(&[n, width])));
        }
        let gathered = g.gather_rows(table, idx)?;
        if mean {
            g.segment_mean(gathered, rows, n)
        } else {
            g.segment_sum(gathered, rows, n)
        }
    }

    /// Embeddings `[seeds, embedding_dim]` in the batch's seed order.
    pub(crate) fn encode_graph(
        &self,
        g: &mut ValueGraph,
        b: &Bound,
        graph: &HeteroGraph,
        batch: &SubgraphBatch,
        tower: Tower,
        mode: BatchNormMode,
        bn_log: &mut Vec<BnRecord>,
    ) -> Result<NodeId> {
        let prefix = self.prefix(tower);
        let t = b
            .towers
            .iter()
            .find(|t| t.prefix == prefix)
            .expect("every tower is bound");
        let n = batch.nodes.len();
        let hdim = self.cfg.hidden();
        if batch.seed_rows.is_empty() {
            return Err(Error::invalid("batch has no seeds"));
        }

        let x = self.inputs(g, b, graph, batch)?;
        let z = g.matmul(x, t.proj.0)?;
        let z = g.add(z, t.proj.1)?;
        let mut h = g.leaky_relu(z)?;

        let (mut src, mut dst) = batch.all_edges();
        if self.cfg.include_target_node {
            src.extend(0..n);
            dst.extend(0..n);
        }
        let src: std::sync::Arc<[usize]> = src.into();
        let dst: std::sync::Arc<[usize]> = dst.into();

        for layer in &t.layers {
            let agg = if src.is_empty() {
                g.input(Tensor::zeros(&[n, hdim]))
            } else {
                let v = g.matmul(h, layer.wv)?;
                let vs = g.gather_rows(v, src.clone())?;
                match (layer.wq, layer.wk) {
                    (Some(wq), Some(wk)) => {
                        let q = g.matmul(h, wq)?;
                        let k = g.matmul(h, wk)?;
                        let qd = g.gather_rows(q, dst.clone())?;
                        let ks = g.gather_rows(k, src.clone())?;
                        let prod = g.mul(qd, ks)?;
                        let scores = g.matmul(prod, b.head_sum.unwrap())?;
                        let alpha = g.segment_softmax(scores, dst.clone(), n)?;
                        let alpha = g.matmul(alpha, b.head_expand.unwrap())?;
                        let msg = g.mul(alpha, vs)?;
                        g.segment_sum(msg, dst.clone(), n)?
                    }
                    _ => g.segment_mean(vs, dst.clone(), n)?,
                }
            };
            let a = g.matmul(h, layer.ws)?;
            let c = g.matmul(agg, layer.wo)?;
            let z = g.add(a, c)?;
            let z = g.add(z, layer.b)?;
            h = g.leaky_relu(z)?;
        }

        let unique = batch.seed_rows.iter().max().unwrap() + 1;
        let mut hs = g.gather_rows(h, (0..unique).collect::<Vec<_>>())?;
        if let Some((gamma, beta)) = t.bn {
            let stats = self.bn_state[prefix].clone();
            hs = g.batch_norm(hs, gamma, beta, mode, stats)?;
            if mode == BatchNormMode::Train {
                bn_log.push((prefix, hs));
            }
        }
        let out = g.matmul(hs, t.out.0)?;
        let out = g.add(out, t.out.1)?;
        g.gather_rows(out, batch.seed_rows.clone())
    }

    /// Eval-mode embeddings for the batch's seeds, one row per seed.
    pub fn encode(&self, graph: &HeteroGraph, batch: &SubgraphBatch, tower: Tower) -> Result<Tensor> {
        let mut g = ValueGraph::new();
        let b = self.bind(&mut g, false)?;
        let e = self.encode_graph(&mut g, &b, graph, batch, tower, BatchNormMode::Eval, &mut Vec::new())?;
        Ok(g.value(e).clone())
    }

    pub fn to_entries(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.params.clone();
        let c = &self.cfg;
        let flags = [
            c.dual_encoder,
            c.tied_init,
            c.include_target_node,
            c.batch_norm,
            c.use_text,
            c.use_categorical,
            c.use_id,
        ];
        let scalars = [
            ("embedding_dim", c.embedding_dim as f64),
            ("units_multiplier", c.units_multiplier as f64),
            ("attention_heads", c.attention_heads as f64),
            ("num_layers", c.num_layers as f64),
            ("pooling", (c.pooling == Pooling::SelfAttention) as u8 as f64),
            ("l2_reg", c.l2_reg),
            ("id_dim", c.id_dim as f64),
            ("categorical_dim", c.categorical_dim as f64),
            ("text_dim", self.dims.text_dim as f64),
            ("id_slots", self.dims.id_slots as f64),
        ];
        for (k, v) in scalars {
            out.insert(format!("config.{k}"), Tensor::scalar(v));
        }
        out.insert(
            "config.flags".into(),
            Tensor::vector(flags.iter().map(|&f| f as u8 as f64).collect()),
        );
        out.insert(
            "config.categorical".into(),
            Tensor::vector(self.dims.categorical.iter().map(|&c| c as f64).collect()),
        );
        for (prefix, s) in &self.bn_state {
            out.insert(format!("state.{prefix}.mean"), Tensor::vector(s.mean.clone()));
            out.insert(format!("state.{prefix}.var"), Tensor::vector(s.var.clone()));
        }
        out
    }

    pub fn from_entries(mut e: BTreeMap<String, Tensor>) -> Result<Self> {
        const WHAT: &str = "gnn checkpoint";
        let mut take = |k: &str| {
            e.remove(&format!("config.{k}"))
                .ok_or_else(|| Error::format(WHAT, format!("missing config.{k}")))
        };
        let scalar = |t: Tensor| t.data().first().copied().unwrap_or(0.0);
        let embedding_dim = scalar(take("embedding_dim")?) as usize;
        let units_multiplier = scalar(take("units_multiplier")?) as usize;
        let attention_heads = scalar(take("attention_heads")?) as usize;
        let num_layers = scalar(take("num_layers")?) as usize;
        let pooling = if scalar(take("pooling")?) != 0.0 { Pooling::SelfAttention } else { Pooling::Mean };
        let l2_reg = scalar(take("l2_reg")?);
        let id_dim = scalar(take("id_dim")?) as usize;
        let categorical_dim = scalar(take("categorical_dim")?) as usize;
        let text_dim = scalar(take("text_dim")?) as usize;
        let id_slots = scalar(take("id_slots")?) as usize;
        let flags = take("flags")?;
        let categorical = take("categorical")?.data().iter().map(|&v| v as usize).collect();
        let f = flags.data();
        if f.len() != 7 {
            return Err(Error::format(WHAT, "config.flags must have 7 entries"));
        }
        let cfg = GnnConfig {
            embedding_dim,
            units_multiplier,
            attention_heads,
            num_layers,
            pooling,
            dual_encoder: f[0] != 0.0,
            tied_init: f[1] != 0.0,
            include_target_node: f[2] != 0.0,
            l2_reg,
            batch_norm: f[3] != 0.0,
            id_dim,
            categorical_dim,
            use_text: f[4] != 0.0,
            use_categorical: f[5] != 0.0,
            use_id: f[6] != 0.0,
        };
        let dims = InputDims {
            text_dim,
            id_slots,
            categorical,
        };
        let mut model = Self::new(cfg, dims, 0)?;
        for (name, t) in model.params.iter_mut() {
            let found = e
                .remove(name)
                .ok_or_else(|| Error::format(WHAT, format!("missing parameter {name}")))?;
            if found.shape() != t.shape() {
                return Err(Error::format(
                    WHAT,
                    format!("{name} has shape {:?}, expected {:?}", found.shape(), t.shape()),
                ));
            }
            *t = found;
        }
        for (prefix, s) in model.bn_state.iter_mut() {
            for (field, dst) in [("mean", &mut s.mean), ("var", &mut s.var)] {
                let t = e
                    .remove(&format!("state.{prefix}.{field}"))
                    .ok_or_else(|| Error::format(WHAT, format!("missing state.{prefix}.{field}")))?;
                if t.len() != dst.len() {
                    return Err(Error::format(WHAT, format!("state.{prefix}.{field} has wrong width")));
                }
                *dst = t.into_data();
            }
        }
        if let Some(extra) = e.keys().next() {
            return Err(Error::format(WHAT, format!("unexpected entry {extra}")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(checkpoint::load(path)?)
    }
}

fn input_width(cfg: &GnnConfig, dims: &InputDims) -> usize {
    let mut w = 0;
    if cfg.use_text {
        w += dims.text_dim;
    }
    if cfg.use_id {
        w += cfg.id_dim;
    }
    if cfg.use_categorical {
        w += cfg.categorical_dim;
    }
    w
}

fn tower_prefixes(cfg: &GnnConfig) -> Vec<&'static str> {
    if cfg.dual_encoder {
        vec!["src", "dst"]
    } else {
        vec!["shared"]
    }
}

/// `sum [H, heads]` adds each head's block of columns, scaled by
/// 1/sqrt(head width); `expand [heads, H]` broadcasts per-head weights back.
fn head_matrices(hidden: usize, heads: usize) -> (Tensor, Tensor) {
    let dh = hidden / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut sum = vec![0.0; hidden * heads];
    let mut expand = vec![0.0; heads * hidden];
    for i in 0..hidden {
        sum[i * heads + i / dh] = scale;
        expand[(i / dh) * hidden + i] = 1.0;
    }
    (
        Tensor::matrix(hidden, heads, sum).unwrap(),
        Tensor::matrix(heads, hidden, expand).unwrap(),
    )
}
