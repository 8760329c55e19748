mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;
use star_core::eval::{generate_world, run_experiment, ExperimentSpec, SyntheticWorldConfig};
use star_core::gnn::{
    adaptive_train, evaluate, infer_embeddings, AdaptiveSamplingConfig, EdgeSplit, GnnConfig,
    GnnModel, GnnTrainConfig, InputDims, LinkTask, MultiTaskConfig, Pooling, Tower,
};
use star_core::graph::{
    build_graph, build_graph_with, write_edges_tsv, write_nodes_tsv, EdgeRegistry, HeteroGraph,
    NodeRecord, NodeRef, NodeType, SamplingStrategy,
};
use star_core::io_util;
use star_core::lifecycle::{
    apply_transform, evaluate_compat, fit_backward_transform, EmbeddingVersion, RegistryFile,
    TransformRecord, VersionStatus, VersionTransform,
};
use star_core::numeric::{AdamWConfig, Tensor, TrainConfig};
use star_core::serving::{
    bench_ingest, digest_bytes, ingest_files, read_events, EmbeddingStore,
};
use star_core::text::{
    evaluate_auc, read_pairs, train, BiEncoder, EncoderConfig, EncoderTrainConfig, LossConfig,
    TextKind, TrainMode,
};

#[derive(Parser)]
#[command(name = "star", version, about = "Marketplace embeddings: text encoder, graph model, lifecycle and serving")]
struct Cli {
    /// Master seed; every random choice derives from it.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Directory for command outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// `key = value` file of flag defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic marketplace world.
    GenWorld(GenWorld),
    /// Fine-tune the text bi-encoder on labelled pairs.
    TrainEncoder(TrainEncoder),
    /// Validate node and edge files and attach text embeddings.
    BuildGraph(BuildGraph),
    /// Train the graph model with adaptive neighbor sampling.
    TrainGnn(TrainGnn),
    /// Compute node embeddings with a trained graph model.
    Infer(Infer),
    /// Fit a backward-compatibility transform between two stores.
    FitCompat(FitCompat),
    /// Map a store into the previous version's space.
    ApplyCompat(ApplyCompat),
    /// Replay update events into an embedding store.
    Ingest(Ingest),
    /// Print one stored embedding as JSON.
    Lookup(Lookup),
    /// Time per-event embedding (not reproducible by nature).
    BenchIngest(BenchIngest),
    /// Validation AUC of a trained model.
    Eval(Eval),
    /// Run a named experiment template.
    RunExperiment(RunExperiment),
}

const SUBCOMMANDS: [&str; 12] = [
    "gen-world",
    "train-encoder",
    "build-graph",
    "train-gnn",
    "infer",
    "fit-compat",
    "apply-compat",
    "ingest",
    "lookup",
    "bench-ingest",
    "eval",
    "run-experiment",
];

#[derive(Args)]
struct GenWorld {
    #[arg(long)]
    members: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    skills: Option<usize>,
    #[arg(long)]
    titles: Option<usize>,
    #[arg(long)]
    companies: Option<usize>,
    #[arg(long)]
    recruiters: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    apply_rate: Option<f64>,
    #[arg(long)]
    pairs_per_member: Option<usize>,
    #[arg(long)]
    replay_events: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    HeadOnly,
}

#[derive(Args)]
struct TrainEncoder {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = 32768)]
    vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 256)]
    max_tokens: usize,
    #[arg(long, default_value_t = 64)]
    head_hidden: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    warmup_steps: u64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 2)]
    grad_accum: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 0.25)]
    eval_every: f64,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, value_enum, default_value = "full")]
    mode: ModeArg,
}

#[derive(Args)]
struct BuildGraph {
    #[arg(long)]
    nodes: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    /// Text embedding store; jobs take their description vector, members the
    /// mean of profile and resume vectors.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct GraphInput {
    #[arg(long)]
    nodes: PathBuf,
    #[arg(long)]
    edges: PathBuf,
}

#[derive(Args)]
struct TrainGnn {
    #[command(flatten)]
    graph: GraphInput,
    /// JSON list of tasks; defaults to apply, InMail and top-applicant.
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 4)]
    units_multiplier: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value = "self_attention")]
    pooling: String,
    #[arg(long)]
    shared_towers: bool,
    #[arg(long)]
    tied_init: bool,
    #[arg(long)]
    no_target_node: bool,
    #[arg(long)]
    no_batch_norm: bool,
    #[arg(long, default_value_t = 1e-5)]
    l2_reg: f64,
    #[arg(long)]
    no_text: bool,
    #[arg(long)]
    no_categorical: bool,
    #[arg(long)]
    no_id: bool,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    warmup_steps: u64,
    #[arg(long, default_value = "random")]
    strategy: String,
    #[arg(long, default_value_t = 20)]
    alpha: usize,
    #[arg(long, default_value_t = 5)]
    sigma: usize,
    #[arg(long, default_value_t = 5)]
    delta: usize,
    #[arg(long, default_value_t = 1e-3)]
    eta: f64,
    #[arg(long, default_value_t = 0.1)]
    eval_every: f64,
    /// Sample α neighbors from the first step instead of growing from σ.
    #[arg(long)]
    fixed_fanout: bool,
}

#[derive(Args)]
struct Infer {
    #[command(flatten)]
    graph: GraphInput,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "member")]
    node_type: String,
    #[arg(long, default_value = "source")]
    tower: String,
    #[arg(long, default_value_t = 20)]
    fanout: usize,
    /// Version id written into the store header.
    #[arg(long)]
    version: u32,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct FitCompat {
    /// Store of the newer version.
    #[arg(long)]
    new: PathBuf,
    /// Store of the version it must stay compatible with.
    #[arg(long)]
    prev: PathBuf,
    #[arg(long, default_value_t = 100)]
    probes: usize,
    #[arg(long, default_value_t = 50)]
    candidates: usize,
    /// Registry to record both versions and the transform in.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Timestamp recorded for newly registered versions.
    #[arg(long, default_value_t = 0)]
    created_at: i64,
}

#[derive(Args)]
struct ApplyCompat {
    #[arg(long)]
    transform: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct Ingest {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    version: u32,
}

#[derive(Args)]
struct Lookup {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    entity_id: u64,
    #[arg(long, default_value = "member_profile")]
    kind: String,
}

#[derive(Args)]
struct BenchIngest {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct Eval {
    /// Labelled pairs for an encoder checkpoint.
    #[arg(long, requires = "encoder")]
    pairs: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Graph model checkpoint; scored on the held-out task edges.
    #[arg(long, requires_all = ["nodes", "edges"], conflicts_with = "encoder")]
    gnn: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<PathBuf>,
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    fanout: usize,
}

#[derive(Args)]
struct RunExperiment {
    #[arg(long)]
    template: String,
    #[arg(long)]
    world_dir: Option<PathBuf>,
    #[arg(long)]
    encoder_epochs: Option<usize>,
    #[arg(long)]
    gnn_epochs: Option<usize>,
    #[arg(long)]
    sampling_seeds: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<()> {
    let argv = config::splice_config(std::env::args().collect(), &SUBCOMMANDS)?;
    let matches = Cli::command().args_override_self(true).get_matches_from(argv);
    let cli = Cli::from_arg_matches(&matches)?;
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out_dir.clone(),
    };
    match cli.cmd {
        Cmd::GenWorld(a) => gen_world(&ctx, a),
        Cmd::TrainEncoder(a) => train_encoder(&ctx, a),
        Cmd::BuildGraph(a) => build_graph_cmd(&ctx, a),
        Cmd::TrainGnn(a) => train_gnn(&ctx, a),
        Cmd::Infer(a) => infer(&ctx, a),
        Cmd::FitCompat(a) => fit_compat(&ctx, a),
        Cmd::ApplyCompat(a) => apply_compat(&ctx, a),
        Cmd::Ingest(a) => ingest(&ctx, a),
        Cmd::Lookup(a) => lookup(a),
        Cmd::BenchIngest(a) => bench(&ctx, a),
        Cmd::Eval(a) => eval(&ctx, a),
        Cmd::RunExperiment(a) => experiment(&ctx, a),
    }
}

struct Ctx {
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    io_util::write_atomic(path, s.as_bytes())?;
    info!("wrote {}", path.display());
    Ok(())
}

fn gen_world(ctx: &Ctx, a: GenWorld) -> Result<()> {
    let mut cfg = SyntheticWorldConfig::default();
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(members, jobs, skills, titles, companies, recruiters, latent_dim, noise, apply_rate, pairs_per_member, replay_events);
    let world = generate_world(&cfg, ctx.seed)?;
    world.write(&ctx.out)?;
    info!(
        "world: {} nodes, {} edges, {} pairs in {}",
        world.nodes.len(),
        world.edges.len(),
        world.pairs.len(),
        ctx.out.display()
    );
    Ok(())
}

fn train_encoder(ctx: &Ctx, a: TrainEncoder) -> Result<()> {
    let pairs = read_pairs(&a.pairs)?;
    let enc = EncoderConfig {
        vocab_size: a.vocab_size,
        dim: a.dim,
        layers: a.layers,
        max_tokens: a.max_tokens,
        head_hidden: a.head_hidden,
    };
    let cfg = EncoderTrainConfig {
        batch: TrainConfig {
            per_worker_batch_size: a.batch_size,
            grad_accumulation_steps: a.grad_accum,
            worker_count: a.workers,
            seed: ctx.seed,
        },
        optimizer: AdamWConfig {
            lr: a.lr,
            warmup_steps: a.warmup_steps,
            weight_decay: a.weight_decay,
            ..AdamWConfig::default()
        },
        loss: LossConfig {
            lambda: a.lambda,
            tau: a.tau,
        },
        epochs: a.epochs,
        eval_every: a.eval_every,
        val_fraction: a.val_fraction,
        mode: match a.mode {
            ModeArg::Full => TrainMode::Full,
            ModeArg::HeadOnly => TrainMode::HeadOnly,
        },
    };
    let model = BiEncoder::new(enc.clone(), ctx.seed)?;
    let out = train(&pairs, model, &cfg)?;
    out.model.save(&ctx.path("encoder.stnc"))?;
    write_json(
        &ctx.path("encoder.metrics.json"),
        &json!({
            "best_val_auc": out.best_auc,
            "effective_batch_size": out.effective_batch_size,
            "train_pairs": out.train_size,
            "val_pairs": out.val_size,
            "trace": out.trace,
            "encoder": enc,
            "train": cfg,
        }),
    )?;
    info!("best validation AUC {:.4}", out.best_auc);
    Ok(())
}

/// Text vector for a graph node, if the store has one.
fn node_text_vector(store: &EmbeddingStore, node: NodeRef) -> Result<Option<Vec<f32>>> {
    let id = node.local_id;
    let get = |kind: TextKind| -> Result<Option<&[f32]>> { Ok(store.lookup(kind.key(id)?)) };
    Ok(match node.node_type {
        NodeType::Job => get(TextKind::JobDescription)?.map(<[f32]>::to_vec),
        NodeType::Member => match (get(TextKind::MemberProfile)?, get(TextKind::MemberResume)?) {
            (Some(p), Some(r)) => Some(p.iter().zip(r).map(|(a, b)| 0.5 * (a + b)).collect()),
            (Some(v), None) | (None, Some(v)) => Some(v.to_vec()),
            (None, None) => None,
        },
        _ => None,
    })
}

fn build_graph_cmd(ctx: &Ctx, a: BuildGraph) -> Result<()> {
    let store = a.embeddings.as_deref().map(EmbeddingStore::load).transpose()?;
    let mut nodes: Vec<NodeRecord> = Vec::new();
    let mut failure = None;
    let mut attached = 0usize;
    let (_, report) = build_graph_with(&a.nodes, &a.edges, EdgeRegistry::standard(), |rec| {
        if let Some(s) = &store {
            match node_text_vector(s, rec.node) {
                Ok(Some(v)) => {
                    rec.features.text_embedding = Some(v);
                    attached += 1;
                }
                Ok(None) => {}
                Err(e) => failure = Some(e),
            }
        }
        nodes.push(rec.clone());
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let edges = star_core::graph::read_edges_tsv(&a.edges)?;
    write_nodes_tsv(&ctx.path("graph_nodes.tsv"), &nodes)?;
    write_edges_tsv(&ctx.path("graph_edges.tsv"), &edges)?;
    write_json(
        &ctx.path("graph.report.json"),
        &json!({ "nodes": report.nodes, "edges": report.edges, "text_embeddings_attached": attached }),
    )?;
    Ok(())
}

fn load_tasks(path: Option<&Path>) -> Result<MultiTaskConfig> {
    Ok(match path {
        Some(p) => MultiTaskConfig::read(p)?,
        None => MultiTaskConfig {
            tasks: LinkTask::standard(),
        },
    })
}

fn load_graph(g: &GraphInput) -> Result<HeteroGraph> {
    Ok(build_graph(&g.nodes, &g.edges)?.0)
}

fn train_gnn(ctx: &Ctx, a: TrainGnn) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let mt = load_tasks(a.tasks.as_deref())?;
    let cfg = GnnConfig {
        embedding_dim: a.embedding_dim,
        units_multiplier: a.units_multiplier,
        attention_heads: a.heads,
        num_layers: a.layers,
        pooling: a.pooling.parse::<Pooling>()?,
        dual_encoder: !a.shared_towers,
        tied_init: a.tied_init,
        include_target_node: !a.no_target_node,
        l2_reg: a.l2_reg,
        batch_norm: !a.no_batch_norm,
        use_text: !a.no_text,
        use_categorical: !a.no_categorical,
        use_id: !a.no_id,
        ..GnnConfig::default()
    };
    let tc = GnnTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        warmup_steps: a.warmup_steps,
        seed: ctx.seed,
        strategy: a.strategy.parse::<SamplingStrategy>()?,
        ..GnnTrainConfig::default()
    };
    let asc = if a.fixed_fanout {
        AdaptiveSamplingConfig::fixed(a.alpha, a.eval_every)
    } else {
        AdaptiveSamplingConfig {
            alpha: a.alpha,
            sigma: a.sigma,
            delta: a.delta,
            eta: a.eta,
            eval_every: a.eval_every,
        }
    };
    let model = GnnModel::new(cfg.clone(), InputDims::from_graph(&g), ctx.seed)?;
    let r = adaptive_train(&g, model, &mt, &asc, &tc)?;
    if let Some(why) = &r.aborted {
        log::warn!("training stopped early: {why}");
    }
    r.model.save(&ctx.path("gnn.stnc"))?;
    write_json(
        &ctx.path("gnn.metrics.json"),
        &json!({
            "best_val_auc": r.best_auc,
            "tasks": r.task_names,
            "steps": r.steps,
            "total_sampled_edges": r.total_sampled_edges,
            "aborted": r.aborted,
            "trace": r.trace,
            "loss_curve": r.loss_curve,
            "model": cfg,
            "train": tc,
            "sampling": asc,
        }),
    )?;
    info!("best validation AUC {:.4}", r.best_auc);
    Ok(())
}

fn infer(ctx: &Ctx, a: Infer) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let model = GnnModel::load(&a.model)?;
    let ty: NodeType = a.node_type.parse()?;
    let tower: Tower = a.tower.parse()?;
    let nodes: Vec<NodeRef> = g.nodes_of_type(ty).map(|i| g.node(i)).collect();
    let r = infer_embeddings(&g, &model, &nodes, tower, a.fanout)?;
    let mut store = EmbeddingStore::new(a.version, model.config().embedding_dim)?;
    for (n, v) in r.entries {
        store.upsert(n.key()?, v)?;
    }
    let out = a.output.unwrap_or_else(|| ctx.path(&format!("{}_v{}.stes", ty.as_str(), a.version)));
    store.save(&out)?;
    info!("{} embeddings written to {}", store.len(), out.display());
    Ok(())
}

fn shared_rows(new: &EmbeddingStore, prev: &EmbeddingStore) -> Result<(Tensor, Tensor)> {
    let keys: Vec<u64> = new.iter().map(|(k, _)| k).filter(|k| prev.contains(*k)).collect();
    if keys.is_empty() {
        bail!("the two stores share no keys");
    }
    let rows = |s: &EmbeddingStore| -> Result<Tensor> {
        let data: Vec<f64> = keys
            .iter()
            .flat_map(|k| s.lookup(*k).unwrap().iter().map(|&v| v as f64))
            .collect();
        Ok(Tensor::matrix(keys.len(), s.dim(), data)?)
    };
    Ok((rows(new)?, rows(prev)?))
}

fn fit_compat(ctx: &Ctx, a: FitCompat) -> Result<()> {
    let new = EmbeddingStore::load(&a.new)?;
    let prev = EmbeddingStore::load(&a.prev)?;
    let (from, to) = (new.version_id(), prev.version_id());
    let (x, y) = shared_rows(&new, &prev)?;
    let t = fit_backward_transform(&x, &y, from, to)?;
    let mut rng = io_util::derived_rng(ctx.seed, "fit-compat/probes");
    let n = x.rows();
    let probe_idx = rand::seq::index::sample(&mut rng, n, a.probes.min(n)).into_vec();
    let probes: Vec<f64> = probe_idx.iter().flat_map(|&i| y.row(i).to_vec()).collect();
    let probes = Tensor::matrix(probe_idx.len(), y.cols(), probes)?;
    let candidates = rand::seq::index::sample(&mut rng, n, a.candidates.min(n)).into_vec();
    let report = evaluate_compat(&t, &x, &y, &probes, &candidates)?;
    let weights = ctx.path(&format!("compat_v{from}_to_v{to}.stnc"));
    t.save(&weights)?;
    write_json(
        &ctx.path(&format!("compat_v{from}_to_v{to}.json")),
        &json!({ "from_version": from, "to_version": to, "fit_rows": t.fit_rows, "residual_rms": t.residual_rms, "ranking": report }),
    )?;
    if let Some(reg) = &a.registry {
        let file = RegistryFile::new(reg);
        let base = reg.parent().unwrap_or(Path::new("."));
        let rel = weights
            .canonicalize()
            .ok()
            .and_then(|w| base.canonicalize().ok().and_then(|b| w.strip_prefix(b).ok().map(Path::to_path_buf)))
            .unwrap_or_else(|| weights.clone());
        let versions = [(to, &a.prev, prev.dim()), (from, &a.new, new.dim())];
        file.update(|r| {
            for (id, path, dim) in versions {
                if r.get(id).is_none() {
                    let bytes = std::fs::read(path).map_err(|e| star_core::Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                    r.register_version(EmbeddingVersion {
                        version_id: id,
                        dim,
                        created_at: a.created_at,
                        model_checksum: digest_bytes(&bytes),
                        status: VersionStatus::Active,
                    })?;
                }
            }
            r.add_transform(TransformRecord {
                from_version: from,
                to_version: to,
                weights: rel.to_string_lossy().into_owned(),
                residual_rms: t.residual_rms,
            })
        })?;
    }
    info!(
        "v{from} -> v{to}: residual rms {:.3e}, mean tau {:?}",
        t.residual_rms, report.mean_tau
    );
    Ok(())
}

fn apply_compat(ctx: &Ctx, a: ApplyCompat) -> Result<()> {
    let t = VersionTransform::load(&a.transform)?;
    let src = EmbeddingStore::load(&a.store)?;
    if src.version_id() != t.from_version {
        bail!(
            "store holds version {}, transform maps version {}",
            src.version_id(),
            t.from_version
        );
    }
    let mut out = EmbeddingStore::new(t.to_version, t.output_dim())?;
    for (k, v) in src.iter() {
        let x: Vec<f64> = v.iter().map(|&f| f as f64).collect();
        let y = apply_transform(&t, &x)?;
        out.upsert(k, y.into_iter().map(|f| f as f32).collect())?;
    }
    let path = a
        .output
        .unwrap_or_else(|| ctx.path(&format!("compat_v{}_as_v{}.stes", t.from_version, t.to_version)));
    out.save(&path)?;
    info!("{} vectors mapped into version {}", out.len(), t.to_version);
    Ok(())
}

fn ingest(ctx: &Ctx, a: Ingest) -> Result<()> {
    let encoder = BiEncoder::load(&a.encoder)?;
    let store = a.store.unwrap_or_else(|| ctx.path("text_embeddings.stes"));
    let cache = a.cache.unwrap_or_else(|| ctx.path("digests.tsv"));
    let stats = ingest_files(&a.events, &cache, &encoder, &store, a.version)?;
    println!("{}", serde_json::to_string(&stats)?);
    info!(
        "{} events: {} embedded, {} skipped",
        stats.total, stats.computed, stats.skipped
    );
    Ok(())
}

fn lookup(a: Lookup) -> Result<()> {
    let store = EmbeddingStore::load(&a.store)?;
    let kind: TextKind = a.kind.parse()?;
    let key = kind.key(a.entity_id)?;
    let v = store.lookup(key);
    println!(
        "{}",
        json!({ "entity_id": a.entity_id, "kind": kind.as_str(), "version": store.version_id(), "found": v.is_some(), "vector": v })
    );
    Ok(())
}

fn bench(ctx: &Ctx, a: BenchIngest) -> Result<()> {
    let encoder = BiEncoder::load(&a.encoder)?;
    let mut events = read_events(&a.events)?;
    if let Some(n) = a.limit {
        events.truncate(n);
    }
    let r = bench_ingest(&events, &encoder)?;
    write_json(&ctx.path("bench.json"), &r)?;
    info!(
        "{:.1} events/s, p50 {:.2} ms, p95 {:.2} ms",
        r.events_per_sec, r.p50_ms, r.p95_ms
    );
    Ok(())
}

fn eval(ctx: &Ctx, a: Eval) -> Result<()> {
    let value = if let Some(model) = &a.gnn {
        let g = build_graph(a.nodes.as_ref().unwrap(), a.edges.as_ref().unwrap())?.0;
        let mt = load_tasks(a.tasks.as_deref())?;
        let model = GnnModel::load(model)?;
        let tc = GnnTrainConfig {
            seed: ctx.seed,
            ..GnnTrainConfig::default()
        };
        let split = EdgeSplit::new(&g, &mt, &tc)?;
        let auc = evaluate(&model, &g, &split, a.fanout)?;
        let names: Vec<&str> = split.tasks.iter().map(|t| t.task.name.as_str()).collect();
        let per_task: BTreeMap<&str, f64> = names.into_iter().zip(auc.iter().copied()).collect();
        json!({ "model": "gnn", "val_auc": auc.iter().sum::<f64>() / auc.len() as f64, "task_auc": per_task })
    } else if let (Some(pairs), Some(enc)) = (&a.pairs, &a.encoder) {
        let model = BiEncoder::load(enc)?;
        let auc = evaluate_auc(&model, &read_pairs(pairs)?)?;
        json!({ "model": "encoder", "auc": auc })
    } else {
        return Err(anyhow!("give either --encoder with --pairs or --gnn with --nodes and --edges"));
    };
    write_json(&ctx.path("eval.json"), &value)?;
    println!("{value}");
    Ok(())
}

fn experiment(ctx: &Ctx, a: RunExperiment) -> Result<()> {
    let mut spec = ExperimentSpec::new(&a.template, ctx.seed);
    spec.world_dir = a.world_dir;
    if let Some(v) = a.encoder_epochs {
        spec.encoder_epochs = v;
    }
    if let Some(v) = a.gnn_epochs {
        spec.gnn_epochs = v;
    }
    if let Some(v) = a.sampling_seeds {
        spec.sampling_seeds = v;
    }
    if let Some(v) = a.lambda {
        spec.lambda = v;
    }
    if let Some(v) = a.tau {
        spec.tau = v;
    }
    let dir = ctx.path(&a.template);
    let report = run_experiment(&spec, Some(&dir))?;
    print!("{}", report.render_table());
    if !report.passed() {
        log::warn!("at least one check failed; see {}", dir.join("report.txt").display());
    }
    Ok(())
}
