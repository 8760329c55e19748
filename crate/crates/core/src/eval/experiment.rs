//! Named experiment templates. Each runs a small ablation and checks the
//! direction of the effect against a declared margin.
//!
//! Reports hold only seed-determined numbers; wall-clock time lives in a
//! separate sidecar so a rerun reproduces `report.json` byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::planted::{planted_graph, PlantedConfig};
use super::world::{generate_world, SyntheticWorldConfig};
use crate::error::{Error, Result};
use crate::gnn::{
    adaptive_train, evaluate, AdaptiveSamplingConfig, EdgeSplit, GnnConfig, GnnModel,
    GnnTrainConfig, InputDims, LinkTask, MultiTaskConfig, TrainReport,
};
use crate::graph::{HeteroGraph, NodeType};
use crate::io_util;
use crate::lifecycle::{evaluate_compat, fit_backward_transform};
use crate::numeric::{AdamWConfig, Tensor, TrainConfig};
use crate::text::{
    read_pairs, train, BiEncoder, EncoderConfig, EncoderTrainConfig, LossConfig, TrainMode,
    TrainOutcome, TrainingPair,
};

pub const TEMPLATES: [&str; 6] = [
    "encoder_frozen_vs_finetuned",
    "encoder_bce_vs_bce_plus_contrastive",
    "gnn_baseline_vs_plus_text_embedding",
    "gnn_minus_categorical",
    "adaptive_vs_fixed_sampling",
    "compat_parity",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub template: String,
    pub seed: u64,
    /// World directory holding `pairs.jsonl`. The encoder templates generate
    /// one in memory from `world` when this is unset.
    pub world_dir: Option<PathBuf>,
    pub world: SyntheticWorldConfig,
    pub encoder: EncoderConfig,
    pub encoder_epochs: usize,
    pub encoder_lr: f64,
    pub encoder_batch: usize,
    pub encoder_accum: usize,
    pub lambda: f64,
    pub tau: f64,
    pub planted: PlantedConfig,
    pub gnn_embedding_dim: usize,
    pub gnn_units_multiplier: usize,
    pub gnn_epochs: usize,
    pub gnn_batch: usize,
    pub gnn_lr: f64,
    /// Evaluation cadence in epochs for the GNN runs.
    pub gnn_eval_every: f64,
    /// Seeds averaged by the sampling comparison.
    pub sampling_seeds: usize,
    pub compat_noise: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            template: String::new(),
            seed: 1,
            world_dir: None,
            world: SyntheticWorldConfig::default(),
            encoder: EncoderConfig::default(),
            encoder_epochs: 4,
            encoder_lr: 1e-3,
            encoder_batch: 16,
            encoder_accum: 2,
            lambda: 0.5,
            tau: 0.1,
            planted: PlantedConfig::default(),
            gnn_embedding_dim: 32,
            gnn_units_multiplier: 2,
            gnn_epochs: 10,
            gnn_batch: 32,
            gnn_lr: 5e-3,
            gnn_eval_every: 0.5,
            sampling_seeds: 3,
            compat_noise: 0.01,
        }
    }
}

impl ExperimentSpec {
    pub fn new(template: &str, seed: u64) -> Self {
        Self {
            template: template.to_owned(),
            seed,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: u64,
    pub val_auc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampled_edges: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    /// Best validation AUC (micro, over all validation pairs).
    pub auc: Option<f64>,
    pub loss_curve: Vec<f64>,
    pub sampled_edges: Option<u64>,
    pub trace: Vec<TracePoint>,
    pub metrics: BTreeMap<String, f64>,
}

impl ArmResult {
    fn named(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            auc: None,
            loss_curve: Vec::new(),
            sampled_edges: None,
            trace: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }
}

/// `value >= threshold`, or `value <= threshold` when `at_most` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub at_most: bool,
    pub passed: bool,
}

impl Check {
    fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.to_owned(),
            value,
            threshold,
            at_most: false,
            passed: value >= threshold,
        }
    }

    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.to_owned(),
            value,
            threshold,
            at_most: true,
            passed: value <= threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub template: String,
    pub seed: u64,
    pub auc_aggregation: String,
    pub config: ExperimentSpec,
    pub arms: Vec<ArmResult>,
    pub checks: Vec<Check>,
    /// Seconds per arm plus `total`; written to the timing sidecar only.
    #[serde(skip)]
    pub wall_clock: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn render_table(&self) -> String {
        let mut s = format!("experiment {} (seed {})\n\n", self.template, self.seed);
        let keys: Vec<&String> = {
            let mut k: Vec<&String> = self.arms.iter().flat_map(|a| a.metrics.keys()).collect();
            k.sort();
            k.dedup();
            k
        };
        let _ = write!(s, "{:<28} {:>8} {:>14}", "arm", "auc", "sampled_edges");
        for k in &keys {
            let _ = write!(s, " {:>16}", k);
        }
        s.push('\n');
        for a in &self.arms {
            let auc = a.auc.map_or("-".into(), |v| format!("{v:.4}"));
            let edges = a.sampled_edges.map_or("-".into(), |v| v.to_string());
            let _ = write!(s, "{:<28} {:>8} {:>14}", a.name, auc, edges);
            for k in &keys {
                let v = a.metrics.get(*k).map_or("-".into(), |v| format!("{v:.6}"));
                let _ = write!(s, " {:>16}", v);
            }
            s.push('\n');
        }
        s.push('\n');
        for c in &self.checks {
            let op = if c.at_most { "<=" } else { ">=" };
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{verdict} {}: {:.6} {op} {}", c.name, c.value, c.threshold);
        }
        s
    }

    /// Writes `report.json`, `report.txt` and `report.timing.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        io_util::write_atomic(&dir.join("report.json"), json.as_bytes())?;
        io_util::write_atomic(&dir.join("report.txt"), self.render_table().as_bytes())?;
        let timing = serde_json::to_string_pretty(&self.wall_clock)?;
        io_util::write_atomic(&dir.join("report.timing.json"), timing.as_bytes())
    }
}

/// Runs one template and, when `run_dir` is given, writes the report there.
pub fn run_experiment(spec: &ExperimentSpec, run_dir: Option<&Path>) -> Result<MetricsReport> {
    let start = Instant::now();
    let mut clock = BTreeMap::new();
    let (arms, checks) = match spec.template.as_str() {
        "encoder_frozen_vs_finetuned" => encoder_frozen_vs_finetuned(spec, &mut clock)?,
        "encoder_bce_vs_bce_plus_contrastive" => encoder_contrastive(spec, &mut clock)?,
        "gnn_baseline_vs_plus_text_embedding" => gnn_plus_text(spec, &mut clock)?,
        "gnn_minus_categorical" => gnn_minus_categorical(spec, &mut clock)?,
        "adaptive_vs_fixed_sampling" => adaptive_vs_fixed(spec, &mut clock)?,
        "compat_parity" => compat_parity(spec, &mut clock)?,
        other => {
            return Err(Error::invalid(format!(
                "unknown experiment template {other:?}; available: {}",
                TEMPLATES.join(", ")
            )))
        }
    };
    clock.insert("total".into(), start.elapsed().as_secs_f64());
    let report = MetricsReport {
        template: spec.template.clone(),
        seed: spec.seed,
        auc_aggregation: "micro".into(),
        config: spec.clone(),
        arms,
        checks,
        wall_clock: clock,
    };
    if let Some(dir) = run_dir {
        report.write(dir)?;
    }
    Ok(report)
}

type Outcome = (Vec<ArmResult>, Vec<Check>);

fn timed<T>(clock: &mut BTreeMap<String, f64>, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f()?;
    clock.insert(name.to_owned(), t.elapsed().as_secs_f64());
    Ok(out)
}

fn auc_of(a: &ArmResult) -> f64 {
    a.auc.unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------- encoder

fn load_pairs(spec: &ExperimentSpec) -> Result<Vec<TrainingPair>> {
    match &spec.world_dir {
        Some(dir) => read_pairs(&dir.join("pairs.jsonl")),
        None => Ok(generate_world(&spec.world, spec.seed)?.pairs),
    }
}

fn encoder_arm(
    spec: &ExperimentSpec,
    pairs: &[TrainingPair],
    name: &str,
    mode: TrainMode,
    lambda: f64,
) -> Result<ArmResult> {
    let cfg = EncoderTrainConfig {
        batch: TrainConfig {
            per_worker_batch_size: spec.encoder_batch,
            grad_accumulation_steps: spec.encoder_accum,
            worker_count: 1,
            seed: spec.seed,
        },
        optimizer: AdamWConfig {
            lr: spec.encoder_lr,
            weight_decay: 0.01,
            ..AdamWConfig::default()
        },
        loss: LossConfig {
            lambda,
            tau: spec.tau,
        },
        epochs: spec.encoder_epochs,
        eval_every: 0.25,
        val_fraction: 0.2,
        mode,
    };
    let model = BiEncoder::new(spec.encoder.clone(), spec.seed)?;
    let out: TrainOutcome = train(pairs, model, &cfg)?;
    let mut arm = ArmResult::named(name);
    arm.auc = Some(out.best_auc);
    arm.loss_curve = out.trace.iter().map(|c| c.train_loss).collect();
    arm.trace = out
        .trace
        .iter()
        .map(|c| TracePoint {
            step: c.step,
            val_auc: c.val_auc,
            sample_count: None,
            sampled_edges: None,
        })
        .collect();
    arm.metrics.insert("lambda".into(), lambda);
    arm.metrics.insert("train_pairs".into(), out.train_size as f64);
    arm.metrics.insert("val_pairs".into(), out.val_size as f64);
    Ok(arm)
}

fn encoder_frozen_vs_finetuned(spec: &ExperimentSpec, clock: &mut BTreeMap<String, f64>) -> Result<Outcome> {
    let pairs = load_pairs(spec)?;
    let frozen = timed(clock, "frozen", || encoder_arm(spec, &pairs, "frozen", TrainMode::HeadOnly, 0.0))?;
    let tuned = timed(clock, "finetuned", || encoder_arm(spec, &pairs, "finetuned", TrainMode::Full, 0.0))?;
    let lift = auc_of(&tuned) - auc_of(&frozen);
    Ok((vec![frozen, tuned], vec![Check::at_least("finetuned_minus_frozen", lift, 0.03)]))
}

fn encoder_contrastive(spec: &ExperimentSpec, clock: &mut BTreeMap<String, f64>) -> Result<Outcome> {
    let pairs = load_pairs(spec)?;
    let bce = timed(clock, "bce", || encoder_arm(spec, &pairs, "bce", TrainMode::Full, 0.0))?;
    let both = timed(clock, "bce_plus_contrastive", || {
        encoder_arm(spec, &pairs, "bce_plus_contrastive", TrainMode::Full, spec.lambda)
    })?;
    let lift = auc_of(&both) - auc_of(&bce);
    Ok((vec![bce, both], vec![Check::at_least("contrastive_minus_bce", lift, 0.0)]))
}

// -------------------------------------------------------------------- gnn

fn apply_task() -> MultiTaskConfig {
    MultiTaskConfig {
        tasks: vec![LinkTask::new("job_apply", "member-job-APPLY", NodeType::Member, NodeType::Job, 1.0)],
    }
}

fn gnn_config(spec: &ExperimentSpec) -> GnnConfig {
    GnnConfig {
        embedding_dim: spec.gnn_embedding_dim,
        units_multiplier: spec.gnn_units_multiplier,
        ..GnnConfig::default()
    }
}

fn gnn_train_config(spec: &ExperimentSpec, seed: u64) -> GnnTrainConfig {
    GnnTrainConfig {
        epochs: spec.gnn_epochs,
        batch_size: spec.gnn_batch,
        lr: spec.gnn_lr,
        seed,
        ..GnnTrainConfig::default()
    }
}

fn gnn_arm(
    name: &str,
    g: &HeteroGraph,
    cfg: GnnConfig,
    asc: &AdaptiveSamplingConfig,
    tc: &GnnTrainConfig,
    with_untrained: bool,
) -> Result<ArmResult> {
    let mt = apply_task();
    let model = GnnModel::new(cfg, InputDims::from_graph(g), tc.seed)?;
    let mut arm = ArmResult::named(name);
    if with_untrained {
        let split = EdgeSplit::new(g, &mt, tc)?;
        let auc = evaluate(&model, g, &split, asc.alpha)?;
        arm.metrics.insert("untrained_auc".into(), auc.iter().sum::<f64>() / auc.len() as f64);
    }
    let r: TrainReport = adaptive_train(g, model, &mt, asc, tc)?;
    if let Some(why) = &r.aborted {
        return Err(Error::Diverged(format!("{name}: {why}")));
    }
    arm.auc = Some(r.best_auc);
    arm.loss_curve = r.loss_curve.clone();
    arm.sampled_edges = Some(r.total_sampled_edges);
    arm.trace = r
        .trace
        .iter()
        .map(|e| TracePoint {
            step: e.step,
            val_auc: e.val_auc,
            sample_count: Some(e.sample_count),
            sampled_edges: Some(e.sampled_edges),
        })
        .collect();
    arm.metrics.insert("steps".into(), r.steps as f64);
    Ok(arm)
}

fn planted(spec: &ExperimentSpec) -> Result<HeteroGraph> {
    planted_graph(&spec.planted, spec.seed)?.build()
}

fn gnn_plus_text(spec: &ExperimentSpec, clock: &mut BTreeMap<String, f64>) -> Result<Outcome> {
    let g = planted(spec)?;
    let asc = AdaptiveSamplingConfig::fixed(20, spec.gnn_eval_every);
    let tc = gnn_train_config(spec, spec.seed);
    let base = GnnConfig {
        use_text: false,
        ..gnn_config(spec)
    };
    let baseline = timed(clock, "baseline", || gnn_arm("baseline", &g, base, &asc, &tc, false))?;
    let full = timed(clock, "plus_text_embedding", || {
        gnn_arm("plus_text_embedding", &g, gnn_config(spec), &asc, &tc, true)
    })?;
    let lift = auc_of(&full) - auc_of(&baseline);
    let checks = vec![Check::at_least("plus_text_minus_baseline", lift, 0.02)];
    Ok((vec![baseline, full], checks))
}

fn gnn_minus_categorical(spec: &ExperimentSpec, clock: &mut BTreeMap<String, f64>) -> Result<Outcome> {
    let g = planted(spec)?;
    let asc = AdaptiveSamplingConfig::fixed(20, spec.gnn_eval_every);
    let tc = gnn_train_config(spec, spec.seed);
    let full = timed(clock, "full", || gnn_arm("full", &g, gnn_config(spec), &asc, &tc, false))?;
    let cfg = GnnConfig {
        use_categorical: false,
        ..gnn_config(spec)
    };
    let minus = timed(clock, "minus_categorical", || gnn_arm("minus_categorical", &g, cfg, &asc, &tc, false))?;
    let drop = auc_of(&full) - auc_of(&minus);
    Ok((vec![full, minus], vec![Check::at_most("full_minus_no_categorical", drop, 0.02)]))
}

fn adaptive_vs_fixed(spec: &ExperimentSpec, clock: &mut BTreeMap<String, f64>) -> Result<Outcome> {
    if spec.sampling_seeds == 0 {
        return Err(Error::invalid("sampling_seeds must be at least 1"));
    }
    let fixed = AdaptiveSamplingConfig::fixed(20, spec.gnn_eval_every);
    let adaptive = AdaptiveSamplingConfig {
        eval_every: spec.gnn_eval_every,
        ..AdaptiveSamplingConfig::default()
    };
    let mut arms = Vec::new();
    let (mut auc_f, mut auc_a, mut edges_f, mut edges_a) = (0.0, 0.0, 0u64, 0u64);
    for k in 0..spec.sampling_seeds as u64 {
        let seed = spec.seed + k;
        let g = planted_graph(&spec.planted, seed)?.build()?;
        let tc = gnn_train_config(spec, seed);
        let f = timed(clock, &format!("fixed/seed{seed}"), || {
            gnn_arm(&format!("fixed/seed{seed}"), &g, gnn_config(spec), &fixed, &tc, false)
        })?;
        let a = timed(clock, &format!("adaptive/seed{seed}"), || {
            gnn_arm(&format!("adaptive/seed{seed}"), &g, gnn_config(spec), &adaptive, &tc, false)
        })?;
        auc_f += auc_of(&f);
        auc_a += auc_of(&a);
        edges_f += f.sampled_edges.unwrap_or(0);
        edges_a += a.sampled_edges.unwrap_or(0);
        arms.push(f);
        arms.push(a);
    }
    let n = spec.sampling_seeds as f64;
    let saving = 1.0 - edges_a as f64 / edges_f.max(1) as f64;
    let checks = vec![
        Check::at_least("adaptive_minus_fixed_auc", (auc_a - auc_f) / n, -0.005),
        Check::at_least("edge_saving", saving, 0.20),
    ];
    Ok((arms, checks))
}

// ----------------------------------------------------------------- compat

fn compat_parity(spec: &ExperimentSpec, clock: &mut BTreeMap<String, f64>) -> Result<Outcome> {
    let t0 = Instant::now();
    let (rows, dim, probes, cands) = (600, 16, 100, 50);
    let mut rng = io_util::derived_rng(spec.seed, "compat/planted");
    let new = Tensor::randn(&[rows, dim], 1.0, &mut rng);
    let planted = Tensor::randn(&[dim, dim], 1.0, &mut rng);
    let clean = new.matmul(&planted.transpose())?;
    let scale = (clean.data().iter().map(|x| x * x).sum::<f64>() / clean.data().len() as f64).sqrt();
    let noise = Tensor::randn(&[rows, dim], spec.compat_noise * scale, &mut rng);
    let noisy = clean.zip_map(&noise, |a, b| a + b);
    let probe = Tensor::randn(&[probes, dim], 1.0, &mut rng);
    let candidates = rand::seq::index::sample(&mut rng, rows, cands).into_vec();

    let mut arms = Vec::new();
    let mut checks = Vec::new();
    for (name, prev) in [("noiseless", &clean), ("noisy", &noisy)] {
        let t = fit_backward_transform(&new, prev, 2, 1)?;
        let r = evaluate_compat(&t, &new, prev, &probe, &candidates)?;
        let mut arm = ArmResult::named(name);
        arm.metrics.insert("residual_rms".into(), t.residual_rms);
        arm.metrics.insert("mean_tau".into(), r.mean_tau.unwrap_or(f64::NAN));
        arm.metrics.insert("min_tau".into(), r.min_tau.unwrap_or(f64::NAN));
        arm.metrics.insert("degenerate".into(), r.degenerate as f64);
        if name == "noiseless" {
            let err = t.weight.max_abs_diff(&planted);
            arm.metrics.insert("max_weight_error".into(), err);
            checks.push(Check::at_most("max_weight_error", err, 1e-6));
        } else {
            arm.metrics.insert("noise".into(), spec.compat_noise);
            checks.push(Check::at_least("mean_tau", r.mean_tau.unwrap_or(f64::NAN), 0.99));
        }
        arms.push(arm);
    }
    clock.insert("fit_and_rank".into(), t0.elapsed().as_secs_f64());
    Ok((arms, checks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_template_lists_the_available_ones() {
        let err = run_experiment(&ExperimentSpec::new("nope", 1), None).unwrap_err().to_string();
        for t in TEMPLATES {
            assert!(err.contains(t), "{err}");
        }
    }

    #[test]
    fn compat_parity_passes_and_repeats() {
        let spec = ExperimentSpec::new("compat_parity", 3);
        let a = run_experiment(&spec, None).unwrap();
        assert!(a.passed(), "{}", a.render_table());
        let b = run_experiment(&spec, None).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
