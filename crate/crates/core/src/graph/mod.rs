//! Heterogeneous graph with interaction and attribute edges, node feature
//! bundles and neighbor samplers.

mod sample;
mod store;
mod tsv;

pub use sample::{
    ppr_scores, subgraph_batch, EdgeMask, HopEdges, Sampler, SamplerConfig, SamplingStrategy,
    PPR_EDGE_TYPE,
    SubgraphBatch,
};
pub use store::{BuildReport, GraphBuilder, HeteroGraph, Neighbors};
pub use tsv::{
    build_graph, build_graph_with, edges_to_tsv, nodes_to_tsv, read_edges_tsv, read_nodes_tsv,
    write_edges_tsv, write_nodes_tsv,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    Member,
    Job,
    Position,
    Skill,
    Title,
    Company,
    Recruiter,
    HireProject,
}

impl NodeType {
    pub const ALL: [NodeType; 8] = [
        NodeType::Member,
        NodeType::Job,
        NodeType::Position,
        NodeType::Skill,
        NodeType::Title,
        NodeType::Company,
        NodeType::Recruiter,
        NodeType::HireProject,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeType::Member => "member",
            NodeType::Job => "job",
            NodeType::Position => "position",
            NodeType::Skill => "skill",
            NodeType::Title => "title",
            NodeType::Company => "company",
            NodeType::Recruiter => "recruiter",
            NodeType::HireProject => "hire_project",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Attribute nodes are shared descriptors; their features come from a
    /// trainable id embedding.
    pub fn is_attribute(self) -> bool {
        matches!(
            self,
            NodeType::Skill | NodeType::Title | NodeType::Company | NodeType::Position
        )
    }
}

impl std::fmt::Display for NodeType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NodeType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown node type {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub node_type: NodeType,
    pub local_id: u64,
}

impl NodeRef {
    pub fn new(node_type: NodeType, local_id: u64) -> Self {
        Self {
            node_type,
            local_id,
        }
    }

    /// Store key: type code in the top byte, local id below.
    pub fn key(self) -> Result<u64> {
        if self.local_id >= 1 << 56 {
            return Err(Error::invalid(format!("local id of {self} does not fit in 56 bits")));
        }
        Ok(((self.node_type.code() as u64) << 56) | self.local_id)
    }

    pub fn from_key(key: u64) -> Option<Self> {
        let t = NodeType::from_code((key >> 56) as u8)?;
        Some(Self::new(t, key & ((1 << 56) - 1)))
    }
}

impl std::fmt::Display for NodeRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.node_type, self.local_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeCategory {
    Interaction,
    Attribute,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeTypeSpec {
    pub name: String,
    pub src: NodeType,
    pub dst: NodeType,
    pub category: EdgeCategory,
}

/// Suffix of the key under which reversed edges are stored.
pub const REVERSE_SUFFIX: &str = ":rev";

pub fn reverse_key(name: &str) -> String {
    format!("{name}{REVERSE_SUFFIX}")
}

/// Declared edge types. Every graph materializes each one in both
/// directions, so the graph's edge-type ids are `2k` (forward) and `2k + 1`
/// (reverse) for registry entry `k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeRegistry {
    specs: Vec<EdgeTypeSpec>,
}

impl Default for EdgeRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

impl EdgeRegistry {
    pub fn empty() -> Self {
        Self { specs: Vec::new() }
    }

    /// Interaction and attribute edge types of the talent marketplace graph.
    pub fn standard() -> Self {
        use EdgeCategory::*;
        use NodeType::*;
        let mut r = Self::empty();
        for (name, src, dst, cat) in [
            ("member-job-APPLY", Member, Job, Interaction),
            ("member-job-SAVE", Member, Job, Interaction),
            ("recruiter-member-INMAIL", Recruiter, Member, Interaction),
            ("job-member-TOP_APPLICANT", Job, Member, Interaction),
            ("recruiter-job-POSTS", Recruiter, Job, Interaction),
            ("hire_project-job", HireProject, Job, Interaction),
            ("member-skill", Member, Skill, Attribute),
            ("job-skill", Job, Skill, Attribute),
            ("member-title", Member, Title, Attribute),
            ("job-title", Job, Title, Attribute),
            ("member-company", Member, Company, Attribute),
            ("job-company", Job, Company, Attribute),
            ("member-position", Member, Position, Attribute),
            ("job-position", Job, Position, Attribute),
        ] {
            r.register(EdgeTypeSpec {
                name: name.into(),
                src,
                dst,
                category: cat,
            })
            .expect("standard registry is consistent");
        }
        r
    }

    pub fn register(&mut self, spec: EdgeTypeSpec) -> Result<()> {
        if spec.name.is_empty() || spec.name.ends_with(REVERSE_SUFFIX) || spec.name.contains('\t') {
            return Err(Error::invalid(format!("bad edge type name {:?}", spec.name)));
        }
        if self.specs.iter().any(|s| s.name == spec.name) {
            return Err(Error::invalid(format!("edge type {} already registered", spec.name)));
        }
        self.specs.push(spec);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&EdgeTypeSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn specs(&self) -> &[EdgeTypeSpec] {
        &self.specs
    }

    /// Forward and reverse specs in graph edge-type id order.
    pub(crate) fn directed(&self) -> Vec<EdgeTypeSpec> {
        self.specs
            .iter()
            .flat_map(|s| {
                [
                    s.clone(),
                    EdgeTypeSpec {
                        name: reverse_key(&s.name),
                        src: s.dst,
                        dst: s.src,
                        category: s.category,
                    },
                ]
            })
            .collect()
    }
}

/// Per-node input features.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub text_embedding: Option<Vec<f32>>,
    pub id_slot: Option<u32>,
    /// `(feature_id, value_id)` pairs.
    pub categorical: Vec<(u32, u32)>,
}

impl FeatureBundle {
    pub fn has_any(&self) -> bool {
        self.text_embedding.is_some() || self.id_slot.is_some() || !self.categorical.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node: NodeRef,
    pub features: FeatureBundle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypedEdge {
    pub src: NodeRef,
    pub dst: NodeRef,
    pub edge_type: String,
    pub timestamp: i64,
    pub weight: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_type_codes_round_trip() {
        for t in NodeType::ALL {
            assert_eq!(NodeType::from_code(t.code()), Some(t));
            assert_eq!(t.as_str().parse::<NodeType>().unwrap(), t);
        }
        assert_eq!(NodeType::from_code(8), None);
    }

    #[test]
    fn registry_rejects_duplicates_and_reserved_names() {
        let mut r = EdgeRegistry::standard();
        let spec = r.get("job-skill").unwrap().clone();
        assert!(r.register(spec).is_err());
        assert!(r
            .register(EdgeTypeSpec {
                name: "x:rev".into(),
                src: NodeType::Job,
                dst: NodeType::Job,
                category: EdgeCategory::Interaction,
            })
            .is_err());
        let d = r.directed();
        assert_eq!(d[1].name, "member-job-APPLY:rev");
        assert_eq!((d[1].src, d[1].dst), (NodeType::Job, NodeType::Member));
    }
}
