use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use star_core::eval::{planted_graph, PlantedConfig};
use star_core::gnn::{
    adaptive_train, build_loss_graph, evaluate, infer_embeddings, multi_task_loss,
    sample_task_batch, score, task_loss, AdaptiveSamplingConfig, AdaptiveSchedule, EdgeSplit,
    GnnConfig, GnnModel, GnnTrainConfig, InputDims, LinkTask, MultiTaskConfig, Pooling, Tower,
};
use star_core::graph::{
    subgraph_batch, EdgeRegistry, FeatureBundle, GraphBuilder, HeteroGraph, NodeRecord, NodeRef,
    NodeType, Sampler, SamplerConfig, SamplingStrategy, TypedEdge,
};
use star_core::numeric::gradcheck::{check, FD_STEP, REL_TOL};

const TEXT_DIM: usize = 3;

fn m(id: u64) -> NodeRef {
    NodeRef::new(NodeType::Member, id)
}
fn j(id: u64) -> NodeRef {
    NodeRef::new(NodeType::Job, id)
}
fn s(id: u64) -> NodeRef {
    NodeRef::new(NodeType::Skill, id)
}

fn entity(node: NodeRef, rng: &mut ChaCha8Rng) -> NodeRecord {
    let attr = node.node_type.is_attribute();
    NodeRecord {
        node,
        features: FeatureBundle {
            text_embedding: (!attr).then(|| (0..TEXT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()),
            id_slot: attr.then_some(node.local_id as u32),
            categorical: if attr { vec![] } else { vec![(0, rng.random_range(0..3))] },
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

/// Members, jobs and skills with apply, save and skill edges.
fn random_graph(seed: u64, members: u64, jobs: u64, skills: u64, edges: usize) -> HeteroGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new(EdgeRegistry::standard());
    for i in 0..members {
        b.add_node(entity(m(i), &mut rng)).unwrap();
    }
    for i in 0..jobs {
        b.add_node(entity(j(i), &mut rng)).unwrap();
    }
    for i in 0..skills {
        b.add_node(entity(s(i), &mut rng)).unwrap();
    }
    for _ in 0..edges {
        let ts = rng.random_range(0..1000);
        let (mi, ji, si) = (
            rng.random_range(0..members),
            rng.random_range(0..jobs),
            rng.random_range(0..skills),
        );
        let e = match rng.random_range(0..4) {
            0 => edge(m(mi), "member-job-APPLY", j(ji), ts),
            1 => edge(m(mi), "member-job-SAVE", j(ji), ts),
            2 => edge(m(mi), "member-skill", s(si), ts),
            _ => edge(j(ji), "job-skill", s(si), ts),
        };
        b.add_edge(&e).unwrap();
    }
    b.build().unwrap().0
}

fn tiny_cfg() -> GnnConfig {
    GnnConfig {
        embedding_dim: 4,
        units_multiplier: 2,
        attention_heads: 2,
        num_layers: 2,
        id_dim: 3,
        categorical_dim: 3,
        ..GnnConfig::default()
    }
}

fn tasks() -> MultiTaskConfig {
    MultiTaskConfig {
        tasks: vec![
            LinkTask::new("job_apply", "member-job-APPLY", NodeType::Member, NodeType::Job, 1.0),
            LinkTask::new("job_save", "member-job-SAVE", NodeType::Member, NodeType::Job, 0.5),
        ],
    }
}

fn sampler(strategy: SamplingStrategy, seed: u64) -> Sampler {
    Sampler::new(SamplerConfig {
        strategy,
        seed,
        ..SamplerConfig::default()
    })
    .unwrap()
}

fn encode_one(model: &GnnModel, g: &HeteroGraph, node: NodeRef, tower: Tower) -> Vec<f64> {
    let all: Vec<usize> = (0..g.edge_types().len()).collect();
    let mut sm = sampler(SamplingStrategy::Temporal, 0);
    let fanouts = vec![10; model.config().num_layers];
    let b = subgraph_batch(g, &[g.require(node).unwrap()], &fanouts, &mut sm, &all, None).unwrap();
    model.encode(g, &b, tower).unwrap().row(0).to_vec()
}

#[test]
fn isolated_node_uses_self_features_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lone = entity(m(99), &mut rng);
    let build = |extra: bool| {
        let mut b = GraphBuilder::new(EdgeRegistry::standard());
        b.add_node(lone.clone()).unwrap();
        if extra {
            let mut r2 = ChaCha8Rng::seed_from_u64(2);
            b.add_node(entity(m(1), &mut r2)).unwrap();
            b.add_node(entity(j(1), &mut r2)).unwrap();
            b.add_node(entity(s(0), &mut r2)).unwrap();
            b.add_edge(&edge(m(1), "member-job-APPLY", j(1), 5)).unwrap();
        }
        b.build().unwrap().0
    };
    let small = build(false);
    let big = build(true);
    for pooling in [Pooling::Mean, Pooling::SelfAttention] {
        let cfg = GnnConfig {
            pooling,
            ..tiny_cfg()
        };
        let model = GnnModel::new(cfg, InputDims::from_graph(&big), 3).unwrap();
        let a = encode_one(&model, &small, m(99), Tower::Source);
        let b = encode_one(&model, &big, m(99), Tower::Source);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b, "{pooling:?}");
    }
}

#[test]
fn mean_pooling_of_identical_neighbors_is_that_neighbor() {
    let feat = FeatureBundle {
        text_embedding: Some(vec![0.3, -0.2, 0.9]),
        id_slot: None,
        categorical: vec![(0, 1)],
    };
    let build = |k: u64| {
        let mut b = GraphBuilder::new(EdgeRegistry::standard());
        b.add_node(NodeRecord {
            node: j(0),
            features: FeatureBundle {
                text_embedding: Some(vec![1.0, 0.0, -1.0]),
                id_slot: None,
                categorical: vec![(0, 2)],
            },
        })
        .unwrap();
        for i in 0..k {
            b.add_node(NodeRecord {
                node: m(i),
                features: feat.clone(),
            })
            .unwrap();
            b.add_edge(&edge(m(i), "member-job-APPLY", j(0), i as i64)).unwrap();
        }
        b.build().unwrap().0
    };
    let cfg = GnnConfig {
        pooling: Pooling::Mean,
        num_layers: 1,
        include_target_node: false,
        ..tiny_cfg()
    };
    let one = build(1);
    let model = GnnModel::new(cfg, InputDims::from_graph(&one), 4).unwrap();
    let base = encode_one(&model, &one, j(0), Tower::Destination);
    for k in [2, 5] {
        let e = encode_one(&model, &build(k), j(0), Tower::Destination);
        for (a, b) in e.iter().zip(&base) {
            assert!((a - b).abs() < 1e-12, "{k}: {a} vs {b}");
        }
    }
}

#[test]
fn shared_towers_are_identical() {
    let g = random_graph(3, 8, 6, 6, 40);
    let cfg = GnnConfig {
        dual_encoder: false,
        ..tiny_cfg()
    };
    let model = GnnModel::new(cfg, InputDims::from_graph(&g), 1).unwrap();
    for n in [m(0), j(3), s(2)] {
        assert_eq!(
            encode_one(&model, &g, n, Tower::Source),
            encode_one(&model, &g, n, Tower::Destination)
        );
    }
    let dual = GnnModel::new(tiny_cfg(), InputDims::from_graph(&g), 1).unwrap();
    assert_ne!(
        encode_one(&dual, &g, m(0), Tower::Source),
        encode_one(&dual, &g, m(0), Tower::Destination)
    );
}

#[test]
fn score_examples() {
    assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    let (a, b) = ([0.3, -1.2, 4.0], [2.0, 0.5, -0.1]);
    assert_eq!(score(&a, &b).unwrap(), score(&b, &a).unwrap());
    assert_eq!(score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
    assert!(score(&[1.0], &[1.0, 2.0]).is_err());
}

fn bce_oracle(logits: &[f64], labels: &[bool]) -> f64 {
    let mut total = 0.0;
    for (&z, &y) in logits.iter().zip(labels) {
        let p = (1.0 / (1.0 + (-z).exp())).clamp(1e-12, 1.0 - 1e-12);
        let y = if y { 1.0 } else { 0.0 };
        total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    total / logits.len() as f64
}

#[test]
fn task_loss_matches_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let logits: Vec<f64> = (0..10).map(|_| rng.random_range(-6.0..6.0)).collect();
        let labels: Vec<bool> = (0..10).map(|_| rng.random_bool(0.5)).collect();
        let got = task_loss(&logits, &labels).unwrap();
        assert!((got - bce_oracle(&logits, &labels)).abs() < 1e-12);
    }
    assert!((task_loss(&[0.0], &[true]).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!(task_loss(&[], &[]).is_err());
}

#[test]
fn multi_task_weighting() {
    let three = MultiTaskConfig {
        tasks: LinkTask::standard(),
    };
    let with = |l: [f64; 3]| {
        let mut c = three.clone();
        for (t, w) in c.tasks.iter_mut().zip(l) {
            t.lambda = w;
        }
        c
    };
    assert_eq!(multi_task_loss(&with([1.0, 0.0, 0.0]), &[0.7, 0.2, 0.9]).unwrap(), 0.7);
    assert_eq!(multi_task_loss(&with([0.0; 3]), &[0.7, 0.2, 0.9]).unwrap(), 0.0);
    let v = multi_task_loss(&with([0.5, 0.5, 1.0]), &[0.2, 0.4, 0.1]).unwrap();
    assert!((v - 0.4).abs() < 1e-15);
}

/// Builds a two-task loss graph on a 20-node graph and checks every
/// parameter against central differences.
fn gradcheck_instance(seed: u64, cfg: GnnConfig) {
    let g = random_graph(seed, 8, 6, 6, 45);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let model = GnnModel::new(cfg, InputDims::from_graph(&g), seed).unwrap();
    let mt = tasks();
    let mut sm = sampler(SamplingStrategy::Random, seed);
    let members = g.nodes_of_type(NodeType::Member);
    let jobs = g.nodes_of_type(NodeType::Job);
    let batches: Vec<_> = mt
        .tasks
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            let pairs: Vec<_> = (0..4)
                .map(|k| (rng.random_range(members.clone()), rng.random_range(jobs.clone()), k % 2 == 0))
                .collect();
            sample_task_batch(&g, ti, t.lambda, &pairs, &mut sm, &[3, 3], None).unwrap()
        })
        .collect();
    let mut lg = build_loss_graph(&model, &g, &batches, true).unwrap();
    let leaves: Vec<_> = lg.graph.params().iter().map(|p| p.1).collect();
    let report = check(&mut lg.graph, lg.total, &leaves, FD_STEP).unwrap();
    assert!(
        report.passes(REL_TOL),
        "seed {seed}: max rel error {:.3e} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn multi_task_loss_gradient_matches_finite_differences() {
    for seed in 0..6 {
        let pooling = if seed % 2 == 0 { Pooling::SelfAttention } else { Pooling::Mean };
        let cfg = GnnConfig {
            pooling,
            batch_norm: seed % 3 != 2,
            dual_encoder: seed != 4,
            ..tiny_cfg()
        };
        gradcheck_instance(seed, cfg);
    }
}

fn short_train(mt: &MultiTaskConfig, lr: f64, cfg: GnnConfig) -> star_core::gnn::TrainReport {
    let g = random_graph(21, 30, 20, 10, 400);
    let model = GnnModel::new(cfg, InputDims::from_graph(&g), 8).unwrap();
    let tc = GnnTrainConfig {
        epochs: 2,
        batch_size: 8,
        lr,
        seed: 8,
        ..GnnTrainConfig::default()
    };
    let asc = AdaptiveSamplingConfig {
        alpha: 6,
        sigma: 2,
        delta: 2,
        eta: 1e-3,
        eval_every: 0.5,
    };
    adaptive_train(&g, model, mt, &asc, &tc).unwrap()
}

#[test]
fn zero_weight_task_reduces_to_single_task() {
    let mut with_zero = tasks();
    with_zero.tasks[1].lambda = 0.0;
    let single = MultiTaskConfig {
        tasks: vec![with_zero.tasks[0].clone()],
    };
    let a = short_train(&with_zero, 1e-2, tiny_cfg());
    let b = short_train(&single, 1e-2, tiny_cfg());
    assert!(a.steps > 4);
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn tied_towers_with_zero_learning_rate_stay_identical() {
    let cfg = GnnConfig {
        tied_init: true,
        ..tiny_cfg()
    };
    let r = short_train(&tasks(), 0.0, cfg);
    assert!(r.steps > 0);
    let src = r.model.tower_params(Tower::Source);
    assert!(!src.is_empty());
    assert_eq!(src, r.model.tower_params(Tower::Destination));
}

#[test]
fn training_records_trace_and_meter() {
    let r = short_train(&tasks(), 1e-2, tiny_cfg());
    assert!(r.aborted.is_none());
    assert_eq!(r.trace.last().unwrap().step, r.steps);
    assert_eq!(r.trace.last().unwrap().sampled_edges, r.total_sampled_edges);
    assert!(r.trace.windows(2).all(|w| w[0].sampled_edges < w[1].sampled_edges));
    assert_eq!(r.trace[0].sample_count, 2);
    assert!(r.best_auc >= r.trace.iter().map(|e| e.val_auc).fold(0.0, f64::max));
    assert_eq!(r.task_names, vec!["job_apply", "job_save"]);
}

#[test]
fn divergence_aborts_with_last_good_model() {
    let g = random_graph(21, 30, 20, 10, 400);
    let model = GnnModel::new(tiny_cfg(), InputDims::from_graph(&g), 8).unwrap();
    let tc = GnnTrainConfig {
        epochs: 1,
        batch_size: 8,
        lr: 1e200,
        seed: 8,
        ..GnnTrainConfig::default()
    };
    let r = adaptive_train(&g, model.clone(), &tasks(), &AdaptiveSamplingConfig::default(), &tc).unwrap();
    assert!(r.aborted.is_some());
    assert_eq!(r.model.params(), model.params());
}

#[test]
fn planted_communities_are_learned() {
    let g = planted_graph(&PlantedConfig::default(), 1).unwrap().build().unwrap();
    let mt = MultiTaskConfig {
        tasks: vec![LinkTask::new("job_apply", "member-job-APPLY", NodeType::Member, NodeType::Job, 1.0)],
    };
    let cfg = GnnConfig {
        embedding_dim: 32,
        units_multiplier: 2,
        ..GnnConfig::default()
    };
    let tc = GnnTrainConfig {
        epochs: 10,
        batch_size: 32,
        lr: 5e-3,
        seed: 5,
        ..GnnTrainConfig::default()
    };
    let model = GnnModel::new(cfg, InputDims::from_graph(&g), 5).unwrap();
    let split = EdgeSplit::new(&g, &mt, &tc).unwrap();
    let untrained = evaluate(&model, &g, &split, 20).unwrap()[0];
    assert!((untrained - 0.5).abs() <= 0.05, "untrained {untrained}");
    let r = adaptive_train(&g, model, &mt, &AdaptiveSamplingConfig::fixed(20, 0.5), &tc).unwrap();
    assert!(r.best_auc >= 0.85, "trained {}", r.best_auc);
}

#[test]
fn inference_is_deterministic_and_counts_missing() {
    let g = random_graph(4, 10, 8, 5, 60);
    let model = GnnModel::new(tiny_cfg(), InputDims::from_graph(&g), 2).unwrap();
    let req = [m(0), m(3), j(7), m(500), s(1), j(99)];
    let a = infer_embeddings(&g, &model, &req, Tower::Source, 5).unwrap();
    let b = infer_embeddings(&g, &model, &req, Tower::Source, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.missing, 2);
    assert_eq!(a.entries.len(), 4);
    assert!(a.entries.iter().all(|(_, v)| v.len() == 4));
    let got: Vec<_> = a.entries.iter().map(|e| e.0).collect();
    assert_eq!(got, vec![m(0), m(3), j(7), s(1)]);
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let g = random_graph(5, 10, 8, 5, 60);
    let trained = short_train(&tasks(), 1e-2, tiny_cfg()).model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gnn.stnc");
    trained.save(&path).unwrap();
    let loaded = GnnModel::load(&path).unwrap();
    assert_eq!(loaded.params(), trained.params());
    assert_eq!(loaded.config(), trained.config());
    let nodes = [m(1), j(2), s(3)];
    for tower in [Tower::Source, Tower::Destination] {
        assert_eq!(
            infer_embeddings(&g, &trained, &nodes, tower, 5).unwrap(),
            infer_embeddings(&g, &loaded, &nodes, tower, 5).unwrap()
        );
    }
}

#[test]
fn config_validation() {
    let bad = GnnConfig {
        embedding_dim: 5,
        units_multiplier: 1,
        attention_heads: 2,
        ..GnnConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(GnnConfig {
        embedding_dim: 0,
        ..GnnConfig::default()
    }
    .validate()
    .is_err());
    let g = random_graph(1, 4, 4, 2, 10);
    let wrong = LinkTask::new("x", "member-job-APPLY", NodeType::Job, NodeType::Member, 1.0);
    assert!(wrong.validate(g.registry()).is_err());
    let neg = LinkTask::new("x", "member-job-APPLY", NodeType::Member, NodeType::Job, -1.0);
    assert!(neg.validate(g.registry()).is_err());
    assert!(MultiTaskConfig { tasks: vec![] }.validate(g.registry()).is_err());
}

proptest! {
    #[test]
    fn schedule_trace_invariant(
        sigma in 1usize..10,
        extra in 0usize..20,
        delta in 1usize..7,
        outcomes in proptest::collection::vec(any::<bool>(), 1..40),
    ) {
        let alpha = sigma + extra;
        let mut sch = AdaptiveSchedule::new(AdaptiveSamplingConfig {
            alpha, sigma, delta, eta: 1e-3, eval_every: 0.1,
        }).unwrap();
        let mut trace = vec![sch.sample_count()];
        for &improved in &outcomes {
            sch.record(improved);
            trace.push(sch.sample_count());
        }
        prop_assert_eq!(trace[0], sigma);
        for (w, &improved) in trace.windows(2).zip(&outcomes) {
            prop_assert!(w[1] <= alpha);
            if improved {
                prop_assert_eq!(w[1], w[0]);
            } else {
                prop_assert_eq!(w[1], (w[0] + delta).min(alpha));
            }
        }
    }
}
