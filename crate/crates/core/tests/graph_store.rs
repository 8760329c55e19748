use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use star_core::graph::{
    build_graph, ppr_scores, subgraph_batch, write_edges_tsv, write_nodes_tsv, EdgeMask,
    EdgeRegistry, FeatureBundle, GraphBuilder, HeteroGraph, NodeRecord, NodeRef, NodeType,
    Sampler, SamplerConfig, SamplingStrategy, TypedEdge,
};

fn entity(t: NodeType, id: u64) -> NodeRecord {
    NodeRecord {
        node: NodeRef::new(t, id),
        features: FeatureBundle {
            text_embedding: None,
            id_slot: if t.is_attribute() { Some(id as u32) } else { None },
            categorical: vec![(0, (id % 3) as u32)],
        },
    }
}

fn edge(src: NodeRef, ty: &str, dst: NodeRef, ts: i64) -> TypedEdge {
    TypedEdge {
        src,
        dst,
        edge_type: ty.into(),
        timestamp: ts,
        weight: 1.0,
    }
}

fn m(id: u64) -> NodeRef {
    NodeRef::new(NodeType::Member, id)
}
fn j(id: u64) -> NodeRef {
    NodeRef::new(NodeType::Job, id)
}
fn s(id: u64) -> NodeRef {
    NodeRef::new(NodeType::Skill, id)
}

/// Random member/job/skill graph with apply and skill edges.
fn random_graph(seed: u64, members: u64, jobs: u64, skills: u64, edges: usize) -> HeteroGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new(EdgeRegistry::standard());
    for i in 0..members {
        b.add_node(entity(NodeType::Member, i)).unwrap();
    }
    for i in 0..jobs {
        b.add_node(entity(NodeType::Job, i)).unwrap();
    }
    for i in 0..skills {
        b.add_node(entity(NodeType::Skill, i)).unwrap();
    }
    for _ in 0..edges {
        let ts = rng.random_range(0..1000);
        let e = match rng.random_range(0..3) {
            0 => edge(m(rng.random_range(0..members)), "member-job-APPLY", j(rng.random_range(0..jobs)), ts),
            1 => edge(m(rng.random_range(0..members)), "member-skill", s(rng.random_range(0..skills)), ts),
            _ => edge(j(rng.random_range(0..jobs)), "job-skill", s(rng.random_range(0..skills)), ts),
        };
        b.add_edge(&e).unwrap();
    }
    b.build().unwrap().0
}

fn all_types(g: &HeteroGraph) -> Vec<usize> {
    (0..g.edge_types().len()).collect()
}

fn sampler(strategy: SamplingStrategy, seed: u64) -> Sampler {
    Sampler::new(SamplerConfig {
        strategy,
        seed,
        ..SamplerConfig::default()
    })
    .unwrap()
}

#[test]
fn single_edge_has_degree_one_each_way() {
    let mut b = GraphBuilder::new(EdgeRegistry::standard());
    b.add_node(entity(NodeType::Member, 1)).unwrap();
    b.add_node(entity(NodeType::Job, 2)).unwrap();
    b.add_edge(&edge(m(1), "member-job-APPLY", j(2), 5)).unwrap();
    let (g, report) = b.build().unwrap();
    let fwd = g.edge_type_id("member-job-APPLY").unwrap();
    let rev = g.edge_type_id("member-job-APPLY:rev").unwrap();
    assert_eq!(g.degree(g.node_index(m(1)).unwrap(), fwd), 1);
    assert_eq!(g.degree(g.node_index(j(2)).unwrap(), rev), 1);
    assert_eq!(report.edges["member-job-APPLY"], 1);
    assert_eq!(report.nodes["member"], 1);
}

#[test]
fn files_build_and_report_errors_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let (np, ep) = (dir.path().join("nodes.tsv"), dir.path().join("edges.tsv"));
    write_nodes_tsv(&np, &[entity(NodeType::Member, 1), entity(NodeType::Job, 2)]).unwrap();
    write_edges_tsv(&ep, &[]).unwrap();
    let (g, _) = build_graph(&np, &ep).unwrap();
    assert!((0..g.node_count()).all(|n| all_types(&g).iter().all(|&t| g.degree(n, t) == 0)));

    write_edges_tsv(&ep, &[edge(m(1), "member-job-APPLY", j(2), 1), edge(m(1), "member-job-APPLY", j(3), 2)]).unwrap();
    let err = build_graph(&np, &ep).unwrap_err().to_string();
    assert!(err.contains("edges.tsv:3") && err.contains("job:3"), "{err}");

    write_nodes_tsv(&np, &[entity(NodeType::Member, 1), entity(NodeType::Member, 1)]).unwrap();
    let err = build_graph(&np, &ep).unwrap_err().to_string();
    assert!(err.contains("nodes.tsv:3") && err.contains("duplicate"), "{err}");
}

#[test]
fn schema_violations_are_rejected() {
    let mut b = GraphBuilder::new(EdgeRegistry::standard());
    b.add_node(entity(NodeType::Member, 1)).unwrap();
    b.add_node(entity(NodeType::Job, 1)).unwrap();
    assert!(b.add_edge(&edge(j(1), "member-job-APPLY", m(1), 0)).is_err());
    assert!(b.add_edge(&edge(m(1), "nope", j(1), 0)).is_err());
    b.add_node(NodeRecord {
        node: s(4),
        features: FeatureBundle { categorical: vec![(0, 1)], ..Default::default() },
    })
    .unwrap();
    assert!(b.build().unwrap_err().to_string().contains("id slot"));
}

#[test]
fn rebuild_is_bit_identical_and_round_trips() {
    let a = random_graph(1, 20, 10, 5, 120);
    let b = random_graph(1, 20, 10, 5, 120);
    let bytes = a.encode();
    assert_eq!(bytes, b.encode());
    assert_eq!(&bytes[..4], b"STGR");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let back = HeteroGraph::decode(&bytes).unwrap();
    assert_eq!(back, a);
    assert!(HeteroGraph::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(HeteroGraph::decode(&bad).is_err());
}

#[test]
fn adjacency_is_most_recent_first() {
    let g = random_graph(2, 10, 10, 4, 200);
    for n in 0..g.node_count() {
        for t in all_types(&g) {
            let nb = g.neighbors(n, t);
            assert!(nb.timestamps.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}

#[test]
fn sampling_examples() {
    let mut b = GraphBuilder::new(EdgeRegistry::standard());
    b.add_node(entity(NodeType::Member, 0)).unwrap();
    for i in 0..3 {
        b.add_node(entity(NodeType::Job, i)).unwrap();
        b.add_edge(&edge(m(0), "member-job-APPLY", j(i), 10 * (i as i64 + 1))).unwrap();
    }
    let (g, _) = b.build().unwrap();
    let mut r = sampler(SamplingStrategy::Random, 1);
    let all = r.sample_by_name(&g, m(0), &["member-job-APPLY"], 5).unwrap();
    assert_eq!(all.len(), 3);
    let mut t = sampler(SamplingStrategy::Temporal, 1);
    let recent: Vec<_> = t
        .sample_by_name(&g, m(0), &["member-job-APPLY"], 2)
        .unwrap()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert_eq!(recent, vec![j(2), j(1)]);
    assert!(r.sample_by_name(&g, m(0), &["bogus"], 2).is_err());
}

#[test]
fn same_seed_same_sample() {
    let g = random_graph(3, 30, 30, 5, 400);
    let ts = all_types(&g);
    let run = |seed| {
        let mut sm = sampler(SamplingStrategy::Random, seed);
        (0..g.node_count())
            .map(|n| sm.sample_neighbors(&g, n, &ts, 3).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn star_graph_batches() {
    let mut b = GraphBuilder::new(EdgeRegistry::standard());
    b.add_node(entity(NodeType::Job, 0)).unwrap();
    for i in 0..5 {
        b.add_node(entity(NodeType::Member, i)).unwrap();
        b.add_edge(&edge(m(i), "member-job-APPLY", j(0), i as i64)).unwrap();
    }
    let (g, _) = b.build().unwrap();
    let hub = g.node_index(j(0)).unwrap();
    let ts = all_types(&g);
    let mut sm = sampler(SamplingStrategy::Random, 0);
    let batch = subgraph_batch(&g, &[hub], &[2], &mut sm, &ts, None).unwrap();
    assert_eq!(batch.nodes.len(), 3);
    assert_eq!(batch.sampled_edges, 2);
    let leaves: HashSet<_> = batch.hops[0].src.iter().collect();
    assert_eq!(leaves.len(), 2);
    let only = subgraph_batch(&g, &[hub, hub], &[], &mut sm, &ts, None).unwrap();
    assert_eq!(only.nodes, vec![hub]);
    assert_eq!(only.seed_rows, vec![0, 0]);
}

#[test]
fn sampled_edge_count_matches_enumeration() {
    let g = random_graph(4, 40, 30, 8, 500);
    let ts = all_types(&g);
    let pooled = |n: usize| ts.iter().map(|&t| g.degree(n, t)).sum::<usize>();
    let mut sm = sampler(SamplingStrategy::Random, 9);
    let seeds: Vec<usize> = (0..g.node_count()).step_by(7).collect();
    let fanouts = [3, 2];
    let batch = subgraph_batch(&g, &seeds, &fanouts, &mut sm, &ts, None).unwrap();
    let mut seen: HashSet<usize> = HashSet::new();
    let mut frontier: Vec<usize> = seeds.iter().copied().filter(|s| seen.insert(*s)).collect();
    let mut total = 0;
    for (h, &f) in fanouts.iter().enumerate() {
        let expected: usize = frontier.iter().map(|&u| pooled(u).min(f)).sum();
        assert_eq!(batch.hops[h].src.len(), expected, "hop {h}");
        total += expected;
        let mut next = Vec::new();
        for &r in &batch.hops[h].src {
            let v = batch.nodes[r];
            if seen.insert(v) {
                next.push(v);
            }
        }
        frontier = next;
    }
    assert_eq!(batch.sampled_edges, total);
}

#[test]
fn masked_pairs_are_never_sampled() {
    let g = random_graph(5, 20, 20, 4, 300);
    let ts = all_types(&g);
    let mut mask = EdgeMask::new();
    for (a, b, _, _) in g.edges_of_type("member-job-APPLY").unwrap() {
        mask.insert(a, b);
    }
    let mut sm = sampler(SamplingStrategy::Random, 1);
    for n in 0..g.node_count() {
        for (v, _) in sm.sample_masked(&g, n, &ts, 100, Some(&mask)).unwrap() {
            assert!(!mask.contains(n, v));
        }
    }
}

fn dense_ppr(g: &HeteroGraph, seed: usize, iters: usize, t: f64) -> Vec<f64> {
    let n = g.node_count();
    let ts = all_types(g);
    let mut a = vec![vec![0.0; n]; n];
    for u in 0..n {
        for &et in &ts {
            for &v in g.neighbors(u, et).nodes {
                a[u][v as usize] += 1.0;
            }
        }
    }
    let mut p = vec![0.0; n];
    p[seed] = 1.0;
    for _ in 0..iters {
        let mut q = vec![0.0; n];
        q[seed] += t;
        for u in 0..n {
            let deg: f64 = a[u].iter().sum();
            if deg == 0.0 {
                q[seed] += (1.0 - t) * p[u];
            } else {
                for v in 0..n {
                    q[v] += (1.0 - t) * p[u] * a[u][v] / deg;
                }
            }
        }
        p = q;
    }
    p
}

#[test]
fn ppr_on_a_path_matches_hand_iteration() {
    let mut b = GraphBuilder::new(EdgeRegistry::standard());
    b.add_node(entity(NodeType::Member, 0)).unwrap();
    b.add_node(entity(NodeType::Job, 0)).unwrap();
    b.add_node(entity(NodeType::Skill, 0)).unwrap();
    b.add_edge(&edge(m(0), "member-job-APPLY", j(0), 0)).unwrap();
    b.add_edge(&edge(j(0), "job-skill", s(0), 0)).unwrap();
    let (g, _) = b.build().unwrap();
    let (a, bb, c) = (g.node_index(m(0)).unwrap(), g.node_index(j(0)).unwrap(), g.node_index(s(0)).unwrap());
    // Path a - b - c, teleport 0.15, written out step by step.
    let t = 0.15;
    let (mut pa, mut pb, mut pc) = (1.0, 0.0, 0.0);
    for _ in 0..5 {
        let na = t + (1.0 - t) * pb / 2.0;
        let nb = (1.0 - t) * (pa + pc);
        let nc = (1.0 - t) * pb / 2.0;
        (pa, pb, pc) = (na, nb, nc);
    }
    let got = ppr_scores(&g, a, 5, t).unwrap();
    assert!((got[&a] - pa).abs() < 1e-12);
    assert!((got[&bb] - pb).abs() < 1e-12);
    assert!((got[&c] - pc).abs() < 1e-12);

    let all_on_seed = ppr_scores(&g, a, 5, 1.0).unwrap();
    assert_eq!(all_on_seed[&a], 1.0);
    assert!(all_on_seed.iter().all(|(&k, &v)| k == a || v == 0.0));
}

#[test]
fn isolated_seed_keeps_all_mass() {
    let g = random_graph(6, 5, 5, 2, 0);
    assert_eq!(ppr_scores(&g, 0, 5, 0.15).unwrap(), BTreeMap::from([(0, 1.0)]));
}

#[test]
fn ppr_sampler_returns_top_scores_without_seed() {
    let g = random_graph(7, 15, 15, 5, 120);
    let mut sm = Sampler::new(SamplerConfig {
        strategy: SamplingStrategy::Ppr,
        ppr_top_k: 4,
        ..SamplerConfig::default()
    })
    .unwrap();
    let seed = (0..g.node_count()).find(|&n| g.degree(n, 0) > 0).unwrap();
    let picked = sm.sample_neighbors(&g, seed, &[0], 10).unwrap();
    assert!(picked.len() <= 4 && !picked.is_empty());
    let scores = ppr_scores(&g, seed, 5, 0.15).unwrap();
    let worst_pick = picked.iter().map(|(v, _)| scores[v]).fold(f64::INFINITY, f64::min);
    for (&v, &sc) in &scores {
        if v != seed && !picked.iter().any(|(p, _)| *p == v) {
            assert!(sc <= worst_pick);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ppr_matches_dense_oracle(seed in 0u64..1000, edges in 0usize..120, iters in 0usize..8, t in 0.05f64..0.95) {
        let g = random_graph(seed, 20, 15, 10, edges);
        prop_assume!(g.node_count() <= 50);
        let src = (seed as usize) % g.node_count();
        let sparse = ppr_scores(&g, src, iters, t).unwrap();
        let dense = dense_ppr(&g, src, iters, t);
        let total: f64 = sparse.values().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for (v, &d) in dense.iter().enumerate() {
            let s = sparse.get(&v).copied().unwrap_or(0.0);
            prop_assert!((s - d).abs() < 1e-9, "node {} sparse {} dense {}", v, s, d);
        }
    }

    #[test]
    fn samples_are_true_neighbors(seed in 0u64..1000, count in 1usize..12, temporal in any::<bool>(), k in 1usize..4) {
        let g = random_graph(seed, 12, 12, 6, 150);
        let strategy = if temporal { SamplingStrategy::Temporal } else { SamplingStrategy::Random };
        let mut sm = sampler(strategy, seed);
        let ts: Vec<usize> = (0..g.edge_types().len()).step_by(k).collect();
        for n in 0..g.node_count() {
            let got = sm.sample_neighbors(&g, n, &ts, count).unwrap();
            let pooled: usize = ts.iter().map(|&t| g.degree(n, t)).sum();
            prop_assert_eq!(got.len(), pooled.min(count));
            for (v, et) in got {
                prop_assert!(ts.contains(&et));
                prop_assert!(g.neighbors(n, et).nodes.contains(&(v as u32)));
            }
        }
    }
}
