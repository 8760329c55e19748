//! Synthetic talent marketplace with planted member and job affinities.
//!
//! Members and jobs get latent vectors. Attribute nodes carry their own
//! latent centroids and attach to the entities they score highest with.
//! Interaction edges and labelled pairs are drawn with probability
//! `sigmoid(scale · u·v / √d + noise · ε + bias)`, with the bias solved by
//! bisection so the expected positive rate equals `apply_rate`. Texts are
//! keyword bags whose words point at the signs of each entity's strongest
//! latent factors, so text carries the same signal as the latents.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, FeatureBundle, NodeRecord, NodeRef, NodeType, TypedEdge};
use crate::io_util;
use crate::serving::{write_events, UpdateEvent};
use crate::text::{write_pairs, TextKind, TrainingPair};

/// Start of the simulated activity window (seconds).
const EPOCH: i64 = 1_600_000_000;
const HORIZON: i64 = 180 * 86_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticWorldConfig {
    pub members: usize,
    pub jobs: usize,
    pub skills: usize,
    pub titles: usize,
    pub companies: usize,
    pub recruiters: usize,
    pub latent_dim: usize,
    /// Multiplier on the normalized latent dot product.
    pub affinity_scale: f64,
    /// Std of the Gaussian noise added to each pair's logit.
    pub noise: f64,
    /// Expected share of positive labelled pairs.
    pub apply_rate: f64,
    pub save_rate: f64,
    pub pairs_per_member: usize,
    pub saves_per_member: usize,
    pub inmails_per_recruiter: usize,
    pub skills_per_entity: usize,
    /// Keyword list length per latent factor and sign.
    pub words_per_factor: usize,
    pub filler_words: usize,
    /// Share of text words drawn from factor keywords.
    pub text_signal: f64,
    pub profile_words: usize,
    pub resume_words: usize,
    pub job_words: usize,
    pub replay_events: usize,
    pub replay_unchanged: f64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            members: 2000,
            jobs: 1000,
            skills: 200,
            titles: 50,
            companies: 100,
            recruiters: 50,
            latent_dim: 8,
            affinity_scale: 3.0,
            noise: 0.5,
            apply_rate: 0.2,
            save_rate: 0.1,
            pairs_per_member: 10,
            saves_per_member: 3,
            inmails_per_recruiter: 20,
            skills_per_entity: 5,
            words_per_factor: 12,
            filler_words: 200,
            text_signal: 0.7,
            profile_words: 16,
            resume_words: 40,
            job_words: 30,
            replay_events: 1000,
            replay_unchanged: 0.3,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.members,
            self.jobs,
            self.skills,
            self.titles,
            self.companies,
            self.recruiters,
            self.latent_dim,
            self.words_per_factor,
            self.filler_words,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid("world counts must all be at least 1"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::invalid("affinity noise must be finite and non-negative"));
        }
        for (name, p) in [
            ("apply_rate", self.apply_rate),
            ("save_rate", self.save_rate),
        ] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.text_signal) || !(0.0..=1.0).contains(&self.replay_unchanged) {
            return Err(Error::invalid("text_signal and replay_unchanged must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label_bias: f64,
    pub save_bias: f64,
    pub affinity_scale: f64,
    pub noise: f64,
    pub empirical_apply_rate: f64,
    /// Replay events whose text equals the snapshot text.
    pub replay_unchanged_events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldManifest {
    pub seed: u64,
    pub config: SyntheticWorldConfig,
    pub counts: BTreeMap<String, usize>,
    pub ground_truth: GroundTruth,
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct World {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<TypedEdge>,
    pub pairs: Vec<TrainingPair>,
    /// Snapshot of every text record.
    pub events: Vec<UpdateEvent>,
    /// Later stream with a fixed share of unchanged texts.
    pub replay: Vec<UpdateEvent>,
    pub member_latent: Vec<Vec<f64>>,
    pub job_latent: Vec<Vec<f64>>,
    pub manifest: WorldManifest,
}

pub const WORLD_FILES: [(&str, &str); 7] = [
    ("nodes", "nodes.tsv"),
    ("edges", "edges.tsv"),
    ("pairs", "pairs.jsonl"),
    ("events", "events.jsonl"),
    ("replay", "replay.jsonl"),
    ("latents", "latents.tsv"),
    ("manifest", "manifest.json"),
];

impl World {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        graph::write_nodes_tsv(&dir.join("nodes.tsv"), &self.nodes)?;
        graph::write_edges_tsv(&dir.join("edges.tsv"), &self.edges)?;
        write_pairs(&dir.join("pairs.jsonl"), &self.pairs)?;
        write_events(&dir.join("events.jsonl"), &self.events)?;
        write_events(&dir.join("replay.jsonl"), &self.replay)?;
        io_util::write_atomic(&dir.join("latents.tsv"), self.latents_tsv().as_bytes())?;
        let mut m = serde_json::to_string_pretty(&self.manifest)?;
        m.push('\n');
        io_util::write_atomic(&dir.join("manifest.json"), m.as_bytes())
    }

    fn latents_tsv(&self) -> String {
        let mut s = String::from("# entity_type\tid\tlatent (comma separated)\n");
        for (name, rows) in [("member", &self.member_latent), ("job", &self.job_latent)] {
            for (i, v) in rows.iter().enumerate() {
                let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                let _ = writeln!(s, "{name}\t{i}\t{}", vals.join(","));
            }
        }
        s
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| normal(rng)).collect()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Bias `b` with `mean(sigmoid(z + b)) = rate`, by bisection.
pub fn calibrate_bias(logits: &[f64], rate: f64) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let mean = |b: f64| logits.iter().map(|z| sigmoid(z + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-100.0, 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Pronounceable pseudo-words, unique within one world.
struct Vocabulary {
    positive: Vec<Vec<String>>,
    negative: Vec<Vec<String>>,
    filler: Vec<String>,
}

impl Vocabulary {
    fn new(cfg: &SyntheticWorldConfig, rng: &mut ChaCha8Rng) -> Self {
        const ONSET: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st"];
        const VOWEL: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
        let mut used = BTreeSet::new();
        let mut word = |rng: &mut ChaCha8Rng| loop {
            let syll = rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syll {
                w.push_str(ONSET.choose(rng).unwrap());
                w.push_str(VOWEL.choose(rng).unwrap());
            }
            if used.insert(w.clone()) {
                return w;
            }
        };
        let mut list = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| word(rng)).collect::<Vec<_>>();
        let d = cfg.latent_dim;
        let positive = (0..d).map(|_| list(cfg.words_per_factor, rng)).collect();
        let negative = (0..d).map(|_| list(cfg.words_per_factor, rng)).collect();
        let filler = list(cfg.filler_words, rng);
        Self {
            positive,
            negative,
            filler,
        }
    }

    /// Words point at factors with probability ∝ latent², signed.
    fn text(&self, latent: &[f64], words: usize, signal: f64, rng: &mut ChaCha8Rng) -> String {
        let weights: Vec<f64> = latent.iter().map(|x| x * x).collect();
        let total: f64 = weights.iter().sum();
        let mut out = Vec::with_capacity(words);
        for _ in 0..words {
            if total > 0.0 && rng.random_bool(signal) {
                let mut u = rng.random::<f64>() * total;
                let mut k = 0;
                while k + 1 < weights.len() && u >= weights[k] {
                    u -= weights[k];
                    k += 1;
                }
                let list = if latent[k] >= 0.0 { &self.positive[k] } else { &self.negative[k] };
                out.push(list.choose(rng).unwrap().as_str());
            } else {
                out.push(self.filler.choose(rng).unwrap().as_str());
            }
        }
        out.join(" ")
    }
}

/// Indices of the `k` attributes with the highest noisy affinity.
fn top_attributes(entity: &[f64], centroids: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (dot(entity, c) + 0.5 * normal(rng), i))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k.min(centroids.len())).map(|s| s.1).collect()
}

fn quantile_bucket(values: &[f64], buckets: usize) -> Vec<u32> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    values
        .iter()
        .map(|v| {
            let rank = sorted.partition_point(|x| x < v);
            ((rank * buckets) / values.len().max(1)).min(buckets - 1) as u32
        })
        .collect()
}

pub fn generate_world(cfg: &SyntheticWorldConfig, seed: u64) -> Result<World> {
    cfg.validate()?;
    let d = cfg.latent_dim;
    let root = |label: &str| io_util::derived_rng(seed, label);
    let mut rng = root("world/latent");
    let member_latent = gaussian_rows(&mut rng, cfg.members, d);
    let job_latent = gaussian_rows(&mut rng, cfg.jobs, d);
    let recruiter_latent = gaussian_rows(&mut rng, cfg.recruiters, d);
    let skill_c = gaussian_rows(&mut rng, cfg.skills, d);
    let title_c = gaussian_rows(&mut rng, cfg.titles, d);
    let company_c = gaussian_rows(&mut rng, cfg.companies, d);
    let norm = (d as f64).sqrt();
    let affinity = |m: usize, j: usize| cfg.affinity_scale * dot(&member_latent[m], &job_latent[j]) / norm;

    let mut rng = root("world/text");
    let vocab = Vocabulary::new(cfg, &mut rng);
    let profiles: Vec<String> = member_latent
        .iter()
        .map(|u| vocab.text(u, cfg.profile_words, cfg.text_signal, &mut rng))
        .collect();
    let resumes: Vec<String> = member_latent
        .iter()
        .map(|u| vocab.text(u, cfg.resume_words, cfg.text_signal, &mut rng))
        .collect();
    let job_texts: Vec<String> = job_latent
        .iter()
        .map(|v| vocab.text(v, cfg.job_words, cfg.text_signal, &mut rng))
        .collect();

    // Nodes. Attribute id slots are laid out skills, titles, companies.
    let mut nodes = Vec::new();
    let mut rng = root("world/categorical");
    let seniority = |lat: &Vec<Vec<f64>>| quantile_bucket(&lat.iter().map(|v| v[0]).collect::<Vec<_>>(), 5);
    let (m_sen, j_sen) = (seniority(&member_latent), seniority(&job_latent));
    for i in 0..cfg.members {
        nodes.push(entity_node(NodeType::Member, i, vec![(0, m_sen[i]), (1, rng.random_range(0..8))]));
    }
    for j in 0..cfg.jobs {
        nodes.push(entity_node(NodeType::Job, j, vec![(0, j_sen[j]), (1, rng.random_range(0..8))]));
    }
    for r in 0..cfg.recruiters {
        nodes.push(entity_node(NodeType::Recruiter, r, vec![(1, rng.random_range(0..8))]));
    }
    let mut slot = 0u32;
    for (t, n) in [
        (NodeType::Skill, cfg.skills),
        (NodeType::Title, cfg.titles),
        (NodeType::Company, cfg.companies),
    ] {
        for i in 0..n {
            nodes.push(NodeRecord {
                node: NodeRef::new(t, i as u64),
                features: FeatureBundle {
                    text_embedding: None,
                    id_slot: Some(slot),
                    categorical: Vec::new(),
                },
            });
            slot += 1;
        }
    }

    let mut edges = Vec::new();
    let mut rng = root("world/attributes");
    let ts = |rng: &mut ChaCha8Rng| EPOCH + rng.random_range(0..HORIZON);
    let m = |i: usize| NodeRef::new(NodeType::Member, i as u64);
    let j = |i: usize| NodeRef::new(NodeType::Job, i as u64);
    let edge = |src, ty: &str, dst, timestamp| TypedEdge {
        src,
        dst,
        edge_type: ty.into(),
        timestamp,
        weight: 1.0,
    };
    for (kind, lat) in [(NodeType::Member, &member_latent), (NodeType::Job, &job_latent)] {
        let prefix = kind.as_str();
        for (i, v) in lat.iter().enumerate() {
            let src = NodeRef::new(kind, i as u64);
            for (t, cents, k) in [
                (NodeType::Skill, &skill_c, cfg.skills_per_entity),
                (NodeType::Title, &title_c, 1),
                (NodeType::Company, &company_c, 1),
            ] {
                for a in top_attributes(v, cents, k, &mut rng) {
                    let name = format!("{prefix}-{}", t.as_str());
                    edges.push(edge(src, &name, NodeRef::new(t, a as u64), ts(&mut rng)));
                }
            }
        }
    }

    // Labelled pairs and apply edges.
    let mut rng = root("world/pairs");
    let mut cand = Vec::with_capacity(cfg.members * cfg.pairs_per_member);
    for mi in 0..cfg.members {
        let picks = rand::seq::index::sample(&mut rng, cfg.jobs, cfg.pairs_per_member.min(cfg.jobs));
        for ji in picks {
            cand.push((mi, ji, affinity(mi, ji) + cfg.noise * normal(&mut rng)));
        }
    }
    let logits: Vec<f64> = cand.iter().map(|c| c.2).collect();
    let label_bias = calibrate_bias(&logits, cfg.apply_rate);
    let mut pairs = Vec::with_capacity(cand.len());
    let mut applicants: BTreeMap<usize, Vec<(f64, usize, i64)>> = BTreeMap::new();
    for &(mi, ji, z) in &cand {
        let label = rng.random_bool(sigmoid(z + label_bias));
        let t = ts(&mut rng);
        if label {
            edges.push(edge(m(mi), "member-job-APPLY", j(ji), t));
            applicants.entry(ji).or_default().push((z, mi, t));
        }
        pairs.push(TrainingPair {
            member_id: mi as u64,
            job_id: ji as u64,
            label: label as u8,
            event_time: t,
            profile_text: profiles[mi].clone(),
            resume_text: resumes[mi].clone(),
            job_text: job_texts[ji].clone(),
        });
    }
    let positives = pairs.iter().filter(|p| p.is_positive()).count();

    // The strongest fifth of each job's applicants, at least one.
    for (ji, mut apps) in applicants {
        apps.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let keep = apps.len().div_ceil(5);
        for &(_, mi, t) in &apps[..keep] {
            edges.push(edge(j(ji), "job-member-TOP_APPLICANT", m(mi), t + 3600));
        }
    }

    let mut rng = root("world/saves");
    let mut save_cand = Vec::new();
    for mi in 0..cfg.members {
        for _ in 0..cfg.saves_per_member {
            let ji = rng.random_range(0..cfg.jobs);
            save_cand.push((mi, ji, affinity(mi, ji) + cfg.noise * normal(&mut rng)));
        }
    }
    let save_logits: Vec<f64> = save_cand.iter().map(|c| c.2).collect();
    let save_bias = calibrate_bias(&save_logits, cfg.save_rate);
    for &(mi, ji, z) in &save_cand {
        if rng.random_bool(sigmoid(z + save_bias)) {
            edges.push(edge(m(mi), "member-job-SAVE", j(ji), ts(&mut rng)));
        }
    }

    let mut rng = root("world/recruiters");
    for ji in 0..cfg.jobs {
        let r = top_attributes(&job_latent[ji], &recruiter_latent, 1, &mut rng)[0];
        edges.push(edge(NodeRef::new(NodeType::Recruiter, r as u64), "recruiter-job-POSTS", j(ji), ts(&mut rng)));
    }
    for (r, rl) in recruiter_latent.iter().enumerate() {
        let pool = rand::seq::index::sample(&mut rng, cfg.members, (3 * cfg.inmails_per_recruiter).min(cfg.members));
        let mut scored: Vec<(f64, usize)> = pool
            .into_iter()
            .map(|mi| (dot(rl, &member_latent[mi]) / norm + cfg.noise * normal(&mut rng), mi))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, mi) in scored.iter().take(cfg.inmails_per_recruiter) {
            edges.push(edge(
                NodeRef::new(NodeType::Recruiter, r as u64),
                "recruiter-member-INMAIL",
                m(mi),
                ts(&mut rng),
            ));
        }
    }

    // Text snapshot, then a replay stream with a fixed unchanged share.
    let mut events = Vec::new();
    for mi in 0..cfg.members {
        events.push(event(mi, TextKind::MemberProfile, &profiles[mi], EPOCH));
        events.push(event(mi, TextKind::MemberResume, &resumes[mi], EPOCH));
    }
    for ji in 0..cfg.jobs {
        events.push(event(ji, TextKind::JobDescription, &job_texts[ji], EPOCH));
    }
    let mut rng = root("world/replay");
    let n_replay = cfg.replay_events.min(events.len());
    let unchanged = (n_replay as f64 * cfg.replay_unchanged).round() as usize;
    let chosen = rand::seq::index::sample(&mut rng, events.len(), n_replay).into_vec();
    let mut replay = Vec::with_capacity(n_replay);
    for (k, &e) in chosen.iter().enumerate() {
        let mut ev = events[e].clone();
        ev.event_time = EPOCH + HORIZON + k as i64;
        if k >= unchanged {
            ev.text.push(' ');
            ev.text.push_str(vocab.filler.choose(&mut rng).unwrap());
        }
        replay.push(ev);
    }
    // Interleave unchanged and edited events.
    {
        use rand::seq::SliceRandom;
        replay.shuffle(&mut rng);
        for (k, ev) in replay.iter_mut().enumerate() {
            ev.event_time = EPOCH + HORIZON + k as i64;
        }
    }

    let mut counts = BTreeMap::new();
    for (k, v) in [
        ("members", cfg.members),
        ("jobs", cfg.jobs),
        ("recruiters", cfg.recruiters),
        ("skills", cfg.skills),
        ("titles", cfg.titles),
        ("companies", cfg.companies),
        ("nodes", nodes.len()),
        ("edges", edges.len()),
        ("pairs", pairs.len()),
        ("positive_pairs", positives),
        ("events", events.len()),
        ("replay_events", replay.len()),
        ("latents", cfg.members + cfg.jobs),
    ] {
        counts.insert(k.to_owned(), v);
    }
    let mut edge_counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in &edges {
        *edge_counts.entry(format!("edges.{}", e.edge_type)).or_default() += 1;
    }
    counts.extend(edge_counts);

    let manifest = WorldManifest {
        seed,
        config: cfg.clone(),
        counts,
        ground_truth: GroundTruth {
            label_bias,
            save_bias,
            affinity_scale: cfg.affinity_scale,
            noise: cfg.noise,
            empirical_apply_rate: positives as f64 / pairs.len().max(1) as f64,
            replay_unchanged_events: unchanged,
        },
        files: WORLD_FILES.iter().map(|(k, f)| (k.to_string(), f.to_string())).collect(),
    };
    Ok(World {
        nodes,
        edges,
        pairs,
        events,
        replay,
        member_latent,
        job_latent,
        manifest,
    })
}

fn entity_node(t: NodeType, id: usize, categorical: Vec<(u32, u32)>) -> NodeRecord {
    NodeRecord {
        node: NodeRef::new(t, id as u64),
        features: FeatureBundle {
            text_embedding: None,
            id_slot: None,
            categorical,
        },
    }
}

fn event(id: usize, kind: TextKind, text: &str, t: i64) -> UpdateEvent {
    UpdateEvent {
        entity_id: id as u64,
        kind,
        text: text.to_owned(),
        event_time: t,
    }
}
