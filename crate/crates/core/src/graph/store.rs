use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::Serialize;

use super::{
    EdgeCategory, EdgeRegistry, EdgeTypeSpec, FeatureBundle, NodeRecord, NodeRef, NodeType,
    TypedEdge,
};
use crate::error::{Error, Result};
use crate::io_util::{self, Reader};

/// Collects nodes and edges, validating each as it arrives.
#[derive(Debug)]
pub struct GraphBuilder {
    registry: EdgeRegistry,
    nodes: BTreeMap<NodeRef, FeatureBundle>,
    edges: Vec<RawEdge>,
}

#[derive(Debug, Clone, Copy)]
struct RawEdge {
    src: NodeRef,
    dst: NodeRef,
    kind: usize,
    timestamp: i64,
    weight: f64,
}

/// Counts reported after a build.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BuildReport {
    pub nodes: BTreeMap<String, usize>,
    /// Forward edges per registered edge type.
    pub edges: BTreeMap<String, usize>,
}

impl GraphBuilder {
    pub fn new(registry: EdgeRegistry) -> Self {
        Self {
            registry,
            nodes: BTreeMap::new(),
            edges: Vec::new(),
        }
    }

    pub fn add_node(&mut self, record: NodeRecord) -> Result<()> {
        if self.nodes.contains_key(&record.node) {
            return Err(Error::invalid(format!("duplicate node {}", record.node)));
        }
        self.nodes.insert(record.node, record.features);
        Ok(())
    }

    pub fn add_edge(&mut self, edge: &TypedEdge) -> Result<()> {
        let kind = self
            .registry
            .specs()
            .iter()
            .position(|s| s.name == edge.edge_type)
            .ok_or_else(|| Error::invalid(format!("unknown edge type {:?}", edge.edge_type)))?;
        let spec = &self.registry.specs()[kind];
        if edge.src.node_type != spec.src || edge.dst.node_type != spec.dst {
            return Err(Error::invalid(format!(
                "edge type {} connects {} to {}, got {} to {}",
                spec.name, spec.src, spec.dst, edge.src.node_type, edge.dst.node_type
            )));
        }
        for end in [edge.src, edge.dst] {
            if !self.nodes.contains_key(&end) {
                return Err(Error::invalid(format!("dangling endpoint {end}")));
            }
        }
        if !(edge.weight >= 0.0 && edge.weight.is_finite()) {
            return Err(Error::invalid(format!("edge weight {} must be finite and >= 0", edge.weight)));
        }
        self.edges.push(RawEdge {
            src: edge.src,
            dst: edge.dst,
            kind,
            timestamp: edge.timestamp,
            weight: edge.weight,
        });
        Ok(())
    }

    pub fn build(self) -> Result<(HeteroGraph, BuildReport)> {
        let mut text_dim: Option<usize> = None;
        for (node, f) in &self.nodes {
            if !f.has_any() {
                return Err(Error::invalid(format!("node {node} has no features")));
            }
            if node.node_type.is_attribute() && f.id_slot.is_none() {
                return Err(Error::invalid(format!("attribute node {node} needs an id slot")));
            }
            if let Some(e) = &f.text_embedding {
                match text_dim {
                    None => text_dim = Some(e.len()),
                    Some(d) if d != e.len() => {
                        return Err(Error::invalid(format!(
                            "node {node} text embedding has dim {}, others have {d}",
                            e.len()
                        )))
                    }
                    _ => {}
                }
                if e.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("node {node} has a non-finite embedding")));
                }
            }
        }

        let nodes: Vec<NodeRef> = self.nodes.keys().copied().collect();
        let features: Vec<FeatureBundle> = self.nodes.into_values().collect();
        let index: HashMap<NodeRef, u32> =
            nodes.iter().enumerate().map(|(i, n)| (*n, i as u32)).collect();
        let edge_types = self.registry.directed();

        // (owner, edge type, -timestamp, neighbor, weight)
        let mut entries: Vec<(u32, u16, i64, u32, f64)> = Vec::with_capacity(2 * self.edges.len());
        for e in &self.edges {
            let (s, d) = (index[&e.src], index[&e.dst]);
            let fwd = (2 * e.kind) as u16;
            entries.push((s, fwd, e.timestamp, d, e.weight));
            entries.push((d, fwd + 1, e.timestamp, s, e.weight));
        }
        entries.sort_by(|a, b| {
            (a.0, a.1)
                .cmp(&(b.0, b.1))
                .then(b.2.cmp(&a.2))
                .then(a.3.cmp(&b.3))
                .then(a.4.total_cmp(&b.4))
        });
        let et = edge_types.len();
        let mut offsets = vec![0u64; nodes.len() * et + 1];
        for e in &entries {
            offsets[e.0 as usize * et + e.1 as usize + 1] += 1;
        }
        for i in 1..offsets.len() {
            offsets[i] += offsets[i - 1];
        }

        let mut report = BuildReport::default();
        for n in &nodes {
            *report.nodes.entry(n.node_type.to_string()).or_default() += 1;
        }
        for spec in self.registry.specs() {
            report.edges.insert(spec.name.clone(), 0);
        }
        for e in &self.edges {
            *report
                .edges
                .get_mut(&self.registry.specs()[e.kind].name)
                .unwrap() += 1;
        }

        let g = HeteroGraph {
            registry: self.registry,
            edge_types,
            nodes,
            index,
            features,
            offsets,
            neighbors: entries.iter().map(|e| e.3).collect(),
            timestamps: entries.iter().map(|e| e.2).collect(),
            weights: entries.iter().map(|e| e.4).collect(),
            text_dim: text_dim.unwrap_or(0),
        };
        Ok((g, report))
    }
}

/// Immutable typed graph with CSR adjacency per (node, edge type). Each
/// list is ordered by timestamp, most recent first.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    registry: EdgeRegistry,
    edge_types: Vec<EdgeTypeSpec>,
    nodes: Vec<NodeRef>,
    index: HashMap<NodeRef, u32>,
    features: Vec<FeatureBundle>,
    offsets: Vec<u64>,
    neighbors: Vec<u32>,
    timestamps: Vec<i64>,
    weights: Vec<f64>,
    text_dim: usize,
}

/// Borrowed adjacency list of one (node, edge type).
#[derive(Clone, Copy, Debug)]
pub struct Neighbors<'a> {
    pub nodes: &'a [u32],
    pub timestamps: &'a [i64],
    pub weights: &'a [f64],
}

impl Neighbors<'_> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

pub const MAGIC: &[u8; 4] = b"STGR";
pub const VERSION: u32 = 1;
const SECTIONS: [&[u8; 4]; 7] = [b"ETYP", b"NODE", b"OFFS", b"NBRS", b"TIME", b"WGHT", b"FEAT"];

impl HeteroGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn registry(&self) -> &EdgeRegistry {
        &self.registry
    }

    /// Directed edge types; reverse types follow their forward type.
    pub fn edge_types(&self) -> &[EdgeTypeSpec] {
        &self.edge_types
    }

    pub fn edge_type_id(&self, name: &str) -> Result<usize> {
        self.edge_types
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown edge type {name:?}")))
    }

    pub fn node_index(&self, node: NodeRef) -> Option<usize> {
        self.index.get(&node).map(|&i| i as usize)
    }

    pub fn require(&self, node: NodeRef) -> Result<usize> {
        self.node_index(node)
            .ok_or_else(|| Error::NotFound(format!("node {node}")))
    }

    pub fn node(&self, idx: usize) -> NodeRef {
        self.nodes[idx]
    }

    pub fn nodes(&self) -> &[NodeRef] {
        &self.nodes
    }

    pub fn features(&self, idx: usize) -> &FeatureBundle {
        &self.features[idx]
    }

    /// Index range of all nodes of type `t` (nodes are sorted by type).
    pub fn nodes_of_type(&self, t: NodeType) -> Range<usize> {
        let lo = self.nodes.partition_point(|n| n.node_type < t);
        let hi = self.nodes.partition_point(|n| n.node_type <= t);
        lo..hi
    }

    pub fn neighbors(&self, idx: usize, edge_type: usize) -> Neighbors<'_> {
        let k = idx * self.edge_types.len() + edge_type;
        let (a, b) = (self.offsets[k] as usize, self.offsets[k + 1] as usize);
        Neighbors {
            nodes: &self.neighbors[a..b],
            timestamps: &self.timestamps[a..b],
            weights: &self.weights[a..b],
        }
    }

    pub fn degree(&self, idx: usize, edge_type: usize) -> usize {
        let k = idx * self.edge_types.len() + edge_type;
        (self.offsets[k + 1] - self.offsets[k]) as usize
    }

    /// All adjacency entries of a node regardless of edge type.
    pub(crate) fn all_neighbors(&self, idx: usize) -> &[u32] {
        let et = self.edge_types.len();
        let (a, b) = (
            self.offsets[idx * et] as usize,
            self.offsets[(idx + 1) * et] as usize,
        );
        &self.neighbors[a..b]
    }

    pub fn total_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Dimension of text embeddings, zero when no node has one.
    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    /// One more than the largest id slot, so a table of this many rows
    /// covers every node.
    pub fn id_slot_count(&self) -> usize {
        self.features
            .iter()
            .filter_map(|f| f.id_slot)
            .max()
            .map_or(0, |m| m as usize + 1)
    }

    /// Per categorical feature id, one more than the largest value id.
    pub fn categorical_cardinalities(&self) -> Vec<u32> {
        let mut card: Vec<u32> = Vec::new();
        for f in &self.features {
            for &(fid, vid) in &f.categorical {
                if card.len() <= fid as usize {
                    card.resize(fid as usize + 1, 0);
                }
                card[fid as usize] = card[fid as usize].max(vid + 1);
            }
        }
        card
    }

    pub fn counts(&self) -> BTreeMap<NodeType, usize> {
        let mut m = BTreeMap::new();
        for n in &self.nodes {
            *m.entry(n.node_type).or_default() += 1;
        }
        m
    }

    /// Forward edges of a registered type as (src, dst, timestamp, weight).
    pub fn edges_of_type(&self, name: &str) -> Result<Vec<(usize, usize, i64, f64)>> {
        let et = self.edge_type_id(name)?;
        if et % 2 == 1 {
            return Err(Error::invalid(format!("{name} is a reverse edge type")));
        }
        let spec = &self.edge_types[et];
        let mut out = Vec::new();
        for s in self.nodes_of_type(spec.src) {
            let nb = self.neighbors(s, et);
            for i in 0..nb.len() {
                out.push((s, nb.nodes[i] as usize, nb.timestamps[i], nb.weights[i]));
            }
        }
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut sections: Vec<Vec<u8>> = vec![Vec::new(); SECTIONS.len()];

        let s = &mut sections[0];
        s.extend((self.registry.specs().len() as u32).to_le_bytes());
        for spec in self.registry.specs() {
            s.extend((spec.name.len() as u32).to_le_bytes());
            s.extend(spec.name.as_bytes());
            s.push(spec.src.code());
            s.push(spec.dst.code());
            s.push(match spec.category {
                EdgeCategory::Interaction => 0,
                EdgeCategory::Attribute => 1,
            });
        }

        let s = &mut sections[1];
        s.extend((self.nodes.len() as u64).to_le_bytes());
        for n in &self.nodes {
            s.push(n.node_type.code());
            s.extend(n.local_id.to_le_bytes());
        }

        sections[2] = self.offsets.iter().flat_map(|v| v.to_le_bytes()).collect();
        sections[3] = self.neighbors.iter().flat_map(|v| v.to_le_bytes()).collect();
        sections[4] = self.timestamps.iter().flat_map(|v| v.to_le_bytes()).collect();
        sections[5] = self.weights.iter().flat_map(|v| v.to_le_bytes()).collect();

        let s = &mut sections[6];
        s.extend((self.text_dim as u32).to_le_bytes());
        for f in &self.features {
            let flags = f.text_embedding.is_some() as u8 | ((f.id_slot.is_some() as u8) << 1);
            s.push(flags);
            if let Some(e) = &f.text_embedding {
                s.extend(e.iter().flat_map(|v| v.to_le_bytes()));
            }
            if let Some(slot) = f.id_slot {
                s.extend(slot.to_le_bytes());
            }
            s.extend((f.categorical.len() as u32).to_le_bytes());
            for &(a, b) in &f.categorical {
                s.extend(a.to_le_bytes());
                s.extend(b.to_le_bytes());
            }
        }

        let header_len = 4 + 4 + 4 + SECTIONS.len() * (4 + 8 + 8);
        let mut out = Vec::with_capacity(header_len + sections.iter().map(Vec::len).sum::<usize>());
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((SECTIONS.len() as u32).to_le_bytes());
        let mut offset = header_len as u64;
        for (tag, body) in SECTIONS.iter().zip(&sections) {
            out.extend(*tag);
            out.extend(offset.to_le_bytes());
            out.extend((body.len() as u64).to_le_bytes());
            offset += body.len() as u64;
        }
        for body in sections {
            out.extend(body);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "graph file";
        let mut r = Reader::new(bytes, WHAT);
        if r.take(4)? != MAGIC {
            return Err(Error::format(WHAT, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(WHAT, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        if count != SECTIONS.len() {
            return Err(Error::format(WHAT, format!("expected {} sections, found {count}", SECTIONS.len())));
        }
        let mut bodies = Vec::with_capacity(count);
        for tag in SECTIONS {
            if r.take(4)? != tag {
                return Err(Error::format(WHAT, "section table out of order"));
            }
            let (off, len) = (r.u64()? as usize, r.u64()? as usize);
            let body = off
                .checked_add(len)
                .and_then(|end| bytes.get(off..end))
                .ok_or_else(|| Error::format(WHAT, "section outside file"))?;
            bodies.push(body);
        }

        let mut s = Reader::new(bodies[0], WHAT);
        let mut registry = EdgeRegistry::empty();
        for _ in 0..s.u32()? {
            let n = s.u32()? as usize;
            let name = std::str::from_utf8(s.take(n)?)
                .map_err(|_| Error::format(WHAT, "edge type name is not UTF-8"))?
                .to_owned();
            let src = NodeType::from_code(s.u8()?).ok_or_else(|| Error::format(WHAT, "bad node type"))?;
            let dst = NodeType::from_code(s.u8()?).ok_or_else(|| Error::format(WHAT, "bad node type"))?;
            let category = match s.u8()? {
                0 => EdgeCategory::Interaction,
                1 => EdgeCategory::Attribute,
                c => return Err(Error::format(WHAT, format!("bad edge category {c}"))),
            };
            registry
                .register(EdgeTypeSpec { name, src, dst, category })
                .map_err(|e| Error::format(WHAT, e.to_string()))?;
        }
        let edge_types = registry.directed();

        let mut s = Reader::new(bodies[1], WHAT);
        let n = s.u64()? as usize;
        let mut nodes = Vec::with_capacity(n.min(bytes.len()));
        for _ in 0..n {
            let t = NodeType::from_code(s.u8()?).ok_or_else(|| Error::format(WHAT, "bad node type"))?;
            nodes.push(NodeRef::new(t, s.u64()?));
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format(WHAT, "node table not sorted"));
        }

        let offsets = read_all(bodies[2], WHAT, 8, |r| r.u64())?;
        let neighbors = read_all(bodies[3], WHAT, 4, |r| r.u32())?;
        let timestamps = read_all(bodies[4], WHAT, 8, |r| r.i64())?;
        let weights = read_all(bodies[5], WHAT, 8, |r| r.f64())?;
        if offsets.len() != nodes.len() * edge_types.len() + 1
            || offsets.first() != Some(&0)
            || offsets.windows(2).any(|w| w[0] > w[1])
            || *offsets.last().unwrap() as usize != neighbors.len()
            || timestamps.len() != neighbors.len()
            || weights.len() != neighbors.len()
            || neighbors.iter().any(|&v| v as usize >= nodes.len())
        {
            return Err(Error::format(WHAT, "inconsistent adjacency arrays"));
        }

        let mut s = Reader::new(bodies[6], WHAT);
        let text_dim = s.u32()? as usize;
        let mut features = Vec::with_capacity(nodes.len());
        for _ in 0..nodes.len() {
            let flags = s.u8()?;
            let text_embedding = if flags & 1 != 0 {
                Some((0..text_dim).map(|_| s.f32()).collect::<Result<Vec<_>>>()?)
            } else {
                None
            };
            let id_slot = if flags & 2 != 0 { Some(s.u32()?) } else { None };
            let nc = s.u32()? as usize;
            let mut categorical = Vec::with_capacity(nc.min(bodies[6].len()));
            for _ in 0..nc {
                categorical.push((s.u32()?, s.u32()?));
            }
            features.push(FeatureBundle {
                text_embedding,
                id_slot,
                categorical,
            });
        }
        if !s.is_done() {
            return Err(Error::format(WHAT, "trailing feature bytes"));
        }
        let index = nodes.iter().enumerate().map(|(i, n)| (*n, i as u32)).collect();
        Ok(Self {
            registry,
            edge_types,
            nodes,
            index,
            features,
            offsets,
            neighbors,
            timestamps,
            weights,
            text_dim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn read_all<T>(
    body: &[u8],
    what: &'static str,
    width: usize,
    mut f: impl FnMut(&mut Reader<'_>) -> Result<T>,
) -> Result<Vec<T>> {
    if body.len() % width != 0 {
        return Err(Error::format(what, "section length not a multiple of element size"));
    }
    let mut r = Reader::new(body, what);
    (0..body.len() / width).map(|_| f(&mut r)).collect()
}
