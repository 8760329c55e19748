//! Tab-separated node and edge files. Blank lines and lines starting with
//! `#` are ignored.
//!
//! nodes: `node_type  local_id  [base64 f32 LE embedding]  [id_slot]  [fid:vid;fid:vid]`
//! edges: `src_type  src_id  edge_type  dst_type  dst_id  timestamp  weight`

use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use super::{
    BuildReport, EdgeRegistry, FeatureBundle, GraphBuilder, HeteroGraph, NodeRecord, NodeRef,
    TypedEdge,
};
use crate::error::{Error, Result};
use crate::io_util;

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_node(line: &str) -> std::result::Result<NodeRecord, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() < 2 || cols.len() > 5 {
        return Err(format!("expected 2 to 5 columns, found {}", cols.len()));
    }
    let node_type = cols[0].parse().map_err(|e: Error| e.to_string())?;
    let local_id = cols[1]
        .parse()
        .map_err(|_| format!("bad local id {:?}", cols[1]))?;
    let col = |i: usize| cols.get(i).copied().unwrap_or("").trim();
    let text_embedding = match col(2) {
        "" => None,
        b64 => {
            let bytes = STANDARD
                .decode(b64)
                .map_err(|e| format!("bad base64 embedding: {e}"))?;
            if bytes.is_empty() || bytes.len() % 4 != 0 {
                return Err("embedding byte length must be a positive multiple of 4".into());
            }
            Some(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
    };
    let id_slot = match col(3) {
        "" => None,
        s => Some(s.parse().map_err(|_| format!("bad id slot {s:?}"))?),
    };
    let mut categorical = Vec::new();
    for pair in col(4).split(';').filter(|p| !p.is_empty()) {
        let (f, v) = pair
            .split_once(':')
            .ok_or_else(|| format!("categorical pair {pair:?} is not fid:vid"))?;
        categorical.push((
            f.parse().map_err(|_| format!("bad feature id {f:?}"))?,
            v.parse().map_err(|_| format!("bad value id {v:?}"))?,
        ));
    }
    Ok(NodeRecord {
        node: NodeRef::new(node_type, local_id),
        features: FeatureBundle {
            text_embedding,
            id_slot,
            categorical,
        },
    })
}

fn parse_edge(line: &str) -> std::result::Result<TypedEdge, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 7 {
        return Err(format!("expected 7 columns, found {}", cols.len()));
    }
    let num = |s: &str, what: &str| -> std::result::Result<u64, String> {
        s.parse().map_err(|_| format!("bad {what} {s:?}"))
    };
    Ok(TypedEdge {
        src: NodeRef::new(cols[0].parse().map_err(|e: Error| e.to_string())?, num(cols[1], "src id")?),
        edge_type: cols[2].to_owned(),
        dst: NodeRef::new(cols[3].parse().map_err(|e: Error| e.to_string())?, num(cols[4], "dst id")?),
        timestamp: cols[5]
            .parse()
            .map_err(|_| format!("bad timestamp {:?}", cols[5]))?,
        weight: cols[6]
            .parse()
            .map_err(|_| format!("bad weight {:?}", cols[6]))?,
    })
}

pub fn read_nodes_tsv(path: &Path) -> Result<Vec<NodeRecord>> {
    let text = io_util::read_to_string(path)?;
    data_lines(&text)
        .map(|(n, l)| parse_node(l).map_err(|m| Error::parse(path, n, m)))
        .collect()
}

pub fn read_edges_tsv(path: &Path) -> Result<Vec<TypedEdge>> {
    let text = io_util::read_to_string(path)?;
    data_lines(&text)
        .map(|(n, l)| parse_edge(l).map_err(|m| Error::parse(path, n, m)))
        .collect()
}

/// Parse both files with the standard edge registry and build the graph.
pub fn build_graph(nodes_path: &Path, edges_path: &Path) -> Result<(HeteroGraph, BuildReport)> {
    build_graph_with(nodes_path, edges_path, EdgeRegistry::standard(), |_| {})
}

/// Like [`build_graph`] with a custom registry and a hook that may edit each
/// node record (for example to attach externally computed embeddings).
pub fn build_graph_with(
    nodes_path: &Path,
    edges_path: &Path,
    registry: EdgeRegistry,
    mut patch: impl FnMut(&mut NodeRecord),
) -> Result<(HeteroGraph, BuildReport)> {
    let mut b = GraphBuilder::new(registry);
    let text = io_util::read_to_string(nodes_path)?;
    for (n, line) in data_lines(&text) {
        let mut rec = parse_node(line).map_err(|m| Error::parse(nodes_path, n, m))?;
        patch(&mut rec);
        b.add_node(rec)
            .map_err(|e| Error::parse(nodes_path, n, e.to_string()))?;
    }
    let text = io_util::read_to_string(edges_path)?;
    for (n, line) in data_lines(&text) {
        let edge = parse_edge(line).map_err(|m| Error::parse(edges_path, n, m))?;
        b.add_edge(&edge)
            .map_err(|e| Error::parse(edges_path, n, e.to_string()))?;
    }
    b.build()
}

pub fn nodes_to_tsv(nodes: &[NodeRecord]) -> String {
    let mut s = String::from("# node_type\tlocal_id\ttext_embedding\tid_slot\tcategorical\n");
    for r in nodes {
        let f = &r.features;
        let emb = f
            .text_embedding
            .as_ref()
            .map(|e| STANDARD.encode(e.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()))
            .unwrap_or_default();
        let slot = f.id_slot.map(|v| v.to_string()).unwrap_or_default();
        let cats: Vec<String> = f.categorical.iter().map(|(a, b)| format!("{a}:{b}")).collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            r.node.node_type,
            r.node.local_id,
            emb,
            slot,
            cats.join(";")
        );
    }
    s
}

pub fn edges_to_tsv(edges: &[TypedEdge]) -> String {
    let mut s = String::from("# src_type\tsrc_id\tedge_type\tdst_type\tdst_id\ttimestamp\tweight\n");
    for e in edges {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.src.node_type,
            e.src.local_id,
            e.edge_type,
            e.dst.node_type,
            e.dst.local_id,
            e.timestamp,
            e.weight
        );
    }
    s
}

pub fn write_nodes_tsv(path: &Path, nodes: &[NodeRecord]) -> Result<()> {
    io_util::write_atomic(path, nodes_to_tsv(nodes).as_bytes())
}

pub fn write_edges_tsv(path: &Path, edges: &[TypedEdge]) -> Result<()> {
    io_util::write_atomic(path, edges_to_tsv(edges).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeType;

    #[test]
    fn node_line_round_trip() {
        let rec = NodeRecord {
            node: NodeRef::new(NodeType::Job, 42),
            features: FeatureBundle {
                text_embedding: Some(vec![0.25, -1.5, 3.0]),
                id_slot: Some(7),
                categorical: vec![(0, 3), (2, 1)],
            },
        };
        let tsv = nodes_to_tsv(std::slice::from_ref(&rec));
        let line = tsv.lines().nth(1).unwrap();
        assert_eq!(parse_node(line).unwrap(), rec);
    }

    #[test]
    fn short_node_lines_are_allowed() {
        let r = parse_node("skill\t3\t\t3").unwrap();
        assert_eq!(r.features.id_slot, Some(3));
        assert!(parse_node("skill").is_err());
        assert!(parse_node("skill\t1\t\t\t1-2").is_err());
    }

    #[test]
    fn edge_line_needs_seven_columns() {
        assert!(parse_edge("member\t1\tmember-job-APPLY\tjob\t2\t10").is_err());
        let e = parse_edge("member\t1\tmember-job-APPLY\tjob\t2\t10\t1").unwrap();
        assert_eq!(e.timestamp, 10);
    }
}
