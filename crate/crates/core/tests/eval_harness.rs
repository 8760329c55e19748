use std::collections::HashSet;
use std::path::Path;

use proptest::prelude::*;
use star_core::eval::{compute_auc, generate_world, SyntheticWorldConfig, World, WORLD_FILES};
use star_core::graph::build_graph;

fn small() -> SyntheticWorldConfig {
    SyntheticWorldConfig {
        members: 300,
        jobs: 150,
        skills: 40,
        titles: 10,
        companies: 20,
        recruiters: 10,
        replay_events: 200,
        ..Default::default()
    }
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            den += 1.0;
            num += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn auc_matches_pairwise_oracle(
        raw in prop::collection::vec((0u8..20, any::<bool>()), 2..500),
        flip in any::<bool>(),
    ) {
        let mut labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
        // Coarse scores force plenty of ties.
        let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 4.0).collect();
        labels[0] = flip;
        labels[1] = !flip;
        let fast = compute_auc(&scores, &labels).unwrap();
        prop_assert!((fast - pairwise_auc(&scores, &labels)).abs() < 1e-12);
    }
}

#[test]
fn auc_is_invariant_to_monotone_transforms() {
    let scores = [0.1, 0.4, 0.35, 0.8, 0.8, 0.2];
    let labels = [false, true, false, true, false, true];
    let a = compute_auc(&scores, &labels).unwrap();
    let squashed: Vec<f64> = scores.iter().map(|s| (5.0 * s).tanh()).collect();
    assert_eq!(a, compute_auc(&squashed, &labels).unwrap());
}

fn world_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    WORLD_FILES
        .iter()
        .map(|(_, f)| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
        .collect()
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_world(&small(), 3).unwrap().write(a.path()).unwrap();
    generate_world(&small(), 3).unwrap().write(b.path()).unwrap();
    assert_eq!(world_files(a.path()), world_files(b.path()));
    let c = tempfile::tempdir().unwrap();
    generate_world(&small(), 4).unwrap().write(c.path()).unwrap();
    assert_ne!(world_files(a.path()), world_files(c.path()));
}

fn data_lines(path: &Path) -> usize {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .count()
}

#[test]
fn manifest_counts_match_files() {
    let dir = tempfile::tempdir().unwrap();
    let w = generate_world(&small(), 1).unwrap();
    w.write(dir.path()).unwrap();
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    for (key, file) in [
        ("nodes", "nodes.tsv"),
        ("edges", "edges.tsv"),
        ("pairs", "pairs.jsonl"),
        ("events", "events.jsonl"),
        ("replay_events", "replay.jsonl"),
        ("latents", "latents.tsv"),
    ] {
        assert_eq!(
            m["counts"][key].as_u64().unwrap() as usize,
            data_lines(&dir.path().join(file)),
            "{key}"
        );
    }
    let (_, report) = build_graph(&dir.path().join("nodes.tsv"), &dir.path().join("edges.tsv")).unwrap();
    for (ty, n) in &report.edges {
        let key = format!("edges.{ty}");
        assert_eq!(m["counts"].get(&key).and_then(|v| v.as_u64()).unwrap_or(0) as usize, *n, "{key}");
    }
    assert_eq!(report.nodes["member"], 300);
}

#[test]
fn label_rate_within_three_standard_errors() {
    let cfg = small();
    let w = generate_world(&cfg, 11).unwrap();
    let n = w.pairs.len() as f64;
    let rate = w.pairs.iter().filter(|p| p.label == 1).count() as f64 / n;
    let se = (cfg.apply_rate * (1.0 - cfg.apply_rate) / n).sqrt();
    assert!((rate - cfg.apply_rate).abs() < 3.0 * se, "rate {rate}, se {se}");
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn label_affinity_corr(w: &World) -> f64 {
    let (aff, lab): (Vec<f64>, Vec<f64>) = w
        .pairs
        .iter()
        .map(|p| {
            let u = &w.member_latent[p.member_id as usize];
            let v = &w.job_latent[p.job_id as usize];
            (u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>(), p.label as f64)
        })
        .unzip();
    pearson(&aff, &lab)
}

#[test]
fn noise_washes_out_the_planted_signal() {
    let clean = generate_world(&small(), 2).unwrap();
    let noisy = generate_world(
        &SyntheticWorldConfig {
            noise: 1e4,
            ..small()
        },
        2,
    )
    .unwrap();
    let (c, n) = (label_affinity_corr(&clean), label_affinity_corr(&noisy));
    assert!(c > 0.3, "clean correlation {c}");
    // 3000 pairs: a null correlation has standard error about 0.018.
    assert!(n.abs() < 0.06, "noisy correlation {n}");
}

#[test]
fn replay_has_exact_unchanged_share() {
    let w = generate_world(&small(), 5).unwrap();
    let snapshot: HashSet<(u64, String, String)> = w
        .events
        .iter()
        .map(|e| (e.entity_id, e.kind.as_str().to_owned(), e.text.clone()))
        .collect();
    let same = w
        .replay
        .iter()
        .filter(|e| snapshot.contains(&(e.entity_id, e.kind.as_str().to_owned(), e.text.clone())))
        .count();
    assert_eq!(w.replay.len(), 200);
    assert_eq!(same, 60);
    assert_eq!(w.manifest.ground_truth.replay_unchanged_events, 60);
}

#[test]
fn text_carries_the_latent_signal() {
    // Members with the same sign on their strongest factor should share more words.
    let w = generate_world(&small(), 8).unwrap();
    let words = |s: &str| s.split(' ').map(str::to_owned).collect::<HashSet<_>>();
    let top = |v: &[f64]| {
        let k = (0..v.len()).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
        (k, v[k] >= 0.0)
    };
    let profiles: Vec<HashSet<String>> = (0..300)
        .map(|i| words(&w.events[2 * i].text))
        .collect();
    let (mut same, mut diff) = ((0.0, 0), (0.0, 0));
    for i in 0..100 {
        for j in (i + 1)..100 {
            let overlap = profiles[i].intersection(&profiles[j]).count() as f64;
            if top(&w.member_latent[i]) == top(&w.member_latent[j]) {
                same = (same.0 + overlap, same.1 + 1);
            } else {
                diff = (diff.0 + overlap, diff.1 + 1);
            }
        }
    }
    assert!(same.0 / same.1 as f64 > 2.0 * diff.0 / diff.1 as f64);
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        SyntheticWorldConfig { members: 0, ..small() },
        SyntheticWorldConfig { apply_rate: 1.0, ..small() },
        SyntheticWorldConfig { noise: f64::NAN, ..small() },
        SyntheticWorldConfig { replay_unchanged: 1.5, ..small() },
    ] {
        assert!(generate_world(&cfg, 0).is_err());
    }
}
