use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::diff::{AdamState, ParamSet};
use crate::error::{Error, Result};
use crate::graph::{load_csv, ChronoSplit, GraphSummary, TemporalGraph};
use crate::meta::{self, Ablation, Context, EpochStats, MetaTestOutput, ModelConfig};
use crate::metrics::MetricsReport;
use crate::tasks::{build_test_tasks, build_train_tasks, derive_seed, NodeTask};

use super::config::RunConfig;
use super::DATA_DIR_ENV;

const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;
const STREAM_VAL: u64 = 13;
const STREAM_TEST: u64 = 14;

fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Format(e.to_string()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// The configured event file, or the synthetic graph when none is set.
pub fn load_graph(cfg: &RunConfig) -> Result<TemporalGraph> {
    match &cfg.data {
        Some(path) => {
            let mut ingest = cfg.ingest(1);
            ingest.node_features = cfg.node_features.as_deref().map(resolve);
            load_csv(&resolve(path), &ingest)
        }
        None => cfg.synth.graph(),
    }
}

fn cap(mut tasks: Vec<NodeTask>, limit: usize) -> Vec<NodeTask> {
    if limit > 0 {
        tasks.truncate(limit);
    }
    tasks
}

/// Graph, split and model shapes shared by every command of one run.
pub struct Experiment {
    pub cfg: RunConfig,
    pub graph: TemporalGraph,
    pub split: ChronoSplit,
    pub model: ModelConfig,
}

impl Experiment {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let graph = load_graph(&cfg)?;
        Self::with_graph(cfg, graph)
    }

    pub fn with_graph(cfg: RunConfig, graph: TemporalGraph) -> Result<Self> {
        cfg.validate()?;
        let split = ChronoSplit::new(&graph, cfg.split)?;
        let model = cfg.model(graph.d_x(), graph.d_e());
        model.encoder.validate()?;
        Ok(Self {
            cfg,
            graph,
            split,
            model,
        })
    }

    pub fn ctx(&self) -> Context<'_> {
        Context {
            graph: &self.graph,
            model: &self.model,
            cfg: &self.cfg.meta,
        }
    }

    pub fn init_params(&self) -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, STREAM_INIT]));
        meta::init_model(&self.model, &mut rng)
    }

    /// Training tasks of `epoch` in a seeded per-epoch order.
    pub fn train_tasks(&self, epoch: u64) -> Result<Vec<NodeTask>> {
        let c = &self.cfg;
        let set = build_train_tasks(&self.graph, &self.split, c.meta.n, c.meta.m, c.seed, epoch, c.train_nodes)?;
        let mut tasks = set.tasks;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[c.seed, STREAM_SHUFFLE, epoch]));
        tasks.shuffle(&mut rng);
        Ok(cap(tasks, c.max_train_tasks))
    }

    pub fn val_tasks(&self) -> Result<Vec<NodeTask>> {
        let c = &self.cfg;
        let set = build_test_tasks(
            &self.graph,
            &self.split.val_new_nodes,
            self.split.val.end,
            c.meta.n,
            derive_seed(&[c.seed, STREAM_VAL]),
        )?;
        Ok(cap(set.tasks, c.max_eval_tasks))
    }

    pub fn test_tasks(&self) -> Result<Vec<NodeTask>> {
        let c = &self.cfg;
        let set = build_test_tasks(
            &self.graph,
            &self.split.test_new_nodes,
            self.graph.num_events(),
            c.meta.n,
            derive_seed(&[c.seed, STREAM_TEST]),
        )?;
        Ok(cap(set.tasks, c.max_eval_tasks))
    }

    pub fn evaluate(&self, params: &ParamSet) -> Result<MetaTestOutput> {
        let tasks = self.test_tasks()?;
        meta::meta_test(self.ctx(), params, &tasks)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    #[serde(flatten)]
    pub stats: EpochStats,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub epochs: usize,
    pub n_train_tasks: usize,
    pub n_val_tasks: usize,
    pub n_test_new_nodes: usize,
    pub graph: GraphSummary,
}

pub struct TrainOutcome {
    pub best: ParamSet,
    pub last: ParamSet,
    pub records: Vec<EpochRecord>,
    pub wall_ms: Vec<u128>,
    pub report: TrainReport,
}

/// Meta-trains for `cfg.meta.epochs` epochs, validating after each one.
/// With `out` set, the run directory is written as training progresses.
pub fn train(exp: &Experiment, out: Option<&Path>) -> Result<TrainOutcome> {
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write(&dir.join("config.txt"), &exp.cfg.to_text())?;
        write(&dir.join("epochs.jsonl"), "")?;
        write(&dir.join("timing.jsonl"), "")?;
    }
    let mut theta = exp.init_params()?;
    let mut adam = AdamState::new(&theta);
    let mut bank = meta::MemoryBank::new();
    let val = exp.val_tasks()?;
    let mut best = theta.clone();
    let mut best_auc: Option<f64> = None;
    let mut best_epoch = None;
    let mut records = Vec::new();
    let mut wall_ms = Vec::new();
    let mut n_train_tasks = 0;
    for epoch in 0..exp.cfg.meta.epochs {
        let start = Instant::now();
        let tasks = exp.train_tasks(epoch as u64)?;
        n_train_tasks = tasks.len();
        let stats = meta::meta_train_epoch(exp.ctx(), &mut theta, &mut adam, &tasks, epoch, &mut bank)?;
        let val_auc = if val.is_empty() {
            None
        } else {
            Some(meta::meta_test(exp.ctx(), &theta, &val)?.report.auc)
        };
        let improved = match (val_auc, best_auc) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = theta.clone();
            best_auc = val_auc;
            best_epoch = Some(epoch);
        }
        let ms = start.elapsed().as_millis();
        let record = EpochRecord { stats, val_auc };
        if let Some(dir) = out {
            append(&dir.join("epochs.jsonl"), &serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?)?;
            append(&dir.join("timing.jsonl"), &json!({"epoch": epoch, "wall_ms": ms as u64}).to_string())?;
            theta.save(&dir.join("checkpoint_last.bin"))?;
            if improved {
                best.save(&dir.join("checkpoint_best.bin"))?;
            }
        }
        records.push(record);
        wall_ms.push(ms);
    }
    let report = TrainReport {
        best_epoch,
        best_val_auc: best_auc,
        epochs: exp.cfg.meta.epochs,
        n_train_tasks,
        n_val_tasks: val.len(),
        n_test_new_nodes: exp.split.test_new_nodes.len(),
        graph: exp.graph.summary(),
    };
    if let Some(dir) = out {
        if exp.cfg.meta.epochs == 0 {
            theta.save(&dir.join("checkpoint_last.bin"))?;
            best.save(&dir.join("checkpoint_best.bin"))?;
        }
        write(&dir.join("train_report.json"), &to_json(&report)?)?;
    }
    Ok(TrainOutcome {
        best,
        last: theta,
        records,
        wall_ms,
        report,
    })
}

fn append(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn per_task_csv(out: &MetaTestOutput) -> String {
    let mut s = String::from("task_id,n_query,auc\n");
    for t in &out.per_task {
        let _ = writeln!(s, "{},{},{}", t.node, t.n_query, t.auc);
    }
    s
}

/// Evaluates `params` on the test new-node tasks and writes `report.json`
/// and `per_task.csv` into `out` when given.
pub fn eval(exp: &Experiment, params: &ParamSet, out: Option<&Path>) -> Result<MetaTestOutput> {
    let result = exp.evaluate(params)?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write(&dir.join("report.json"), &to_json(&result.report)?)?;
        write(&dir.join("per_task.csv"), &per_task_csv(&result))?;
    }
    Ok(result)
}

/// Writes the synthetic graph as `events.csv`, `nodes.csv` and
/// `summary.json`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<GraphSummary> {
    let generated = cfg.synth.generate()?;
    ensure_dir(out)?;
    write(&out.join("events.csv"), &generated.events_csv)?;
    write(&out.join("nodes.csv"), &generated.nodes_csv)?;
    let summary = cfg.synth.graph()?.summary();
    write(&out.join("summary.json"), &to_json(&summary)?)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub variant: String,
    pub acc: f64,
    pub auc: f64,
    pub macro_f1: f64,
}

impl VariantResult {
    fn new(variant: impl Into<String>, r: &MetricsReport) -> Self {
        Self {
            variant: variant.into(),
            acc: r.acc,
            auc: r.auc,
            macro_f1: r.macro_f1,
        }
    }
}

/// Trains and evaluates one configuration in `dir/name`.
fn train_and_eval(cfg: RunConfig, graph: &TemporalGraph, dir: Option<&Path>, name: &str) -> Result<(MetricsReport, u128)> {
    let start = Instant::now();
    let exp = Experiment::with_graph(cfg, graph.clone())?;
    let sub = dir.map(|d| d.join(name));
    let trained = train(&exp, sub.as_deref())?;
    let result = eval(&exp, &trained.best, sub.as_deref())?;
    Ok((result.report, start.elapsed().as_millis()))
}

pub const ABLATIONS: [(&str, Ablation); 4] = [
    (
        "full",
        Ablation {
            no_meta: false,
            no_span_adapt: false,
            no_node_adapt: false,
        },
    ),
    (
        "no_meta",
        Ablation {
            no_meta: true,
            no_span_adapt: false,
            no_node_adapt: false,
        },
    ),
    (
        "no_span_adapt",
        Ablation {
            no_meta: false,
            no_span_adapt: true,
            no_node_adapt: false,
        },
    ),
    (
        "no_node_adapt",
        Ablation {
            no_meta: false,
            no_span_adapt: false,
            no_node_adapt: true,
        },
    ),
];

/// Full model and the three ablations under one seed; writes
/// `ablation.csv` and `ablation.json`.
pub fn ablate(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<VariantResult>> {
    cfg.validate()?;
    let graph = load_graph(cfg)?;
    let mut rows = Vec::new();
    let mut timing = String::from("variant,wall_ms\n");
    for (name, ablation) in ABLATIONS {
        let (report, ms) = train_and_eval(cfg.with_ablation(ablation), &graph, out, name)?;
        rows.push(VariantResult::new(name, &report));
        let _ = writeln!(timing, "{name},{ms}");
    }
    if let Some(dir) = out {
        let mut csv = String::from("variant,acc,auc,macro_f1\n");
        for r in &rows {
            let _ = writeln!(csv, "{},{},{},{}", r.variant, r.acc, r.auc, r.macro_f1);
        }
        write(&dir.join("ablation.csv"), &csv)?;
        write(&dir.join("ablation.json"), &to_json(&rows)?)?;
        write(&dir.join("ablation_timing.csv"), &timing)?;
    }
    Ok(rows)
}

pub const SWEEP_AXES: [&str; 6] = ["n", "span_size", "batch_size", "d", "k", "inner_steps"];

fn sweep_key(axis: &str) -> Result<&'static str> {
    let normalized = axis.to_ascii_lowercase();
    let key = match normalized.as_str() {
        "n" => "n",
        "span_size" | "span" | "i" => "span_size",
        "batch" | "batch_size" => "batch_size",
        "d" => "d",
        "k" => "k",
        "inner_steps" | "steps" => "inner_steps",
        _ => return Err(Error::Config(format!("unknown sweep axis {axis:?}; expected one of {SWEEP_AXES:?}"))),
    };
    Ok(key)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub value: String,
    pub acc: f64,
    pub auc: f64,
    pub macro_f1: f64,
}

/// One train+eval per value of `axis`; writes `sweep.csv` and, separately,
/// `sweep_timing.csv`. With `parallel` the points run concurrently; results
/// are identical either way.
pub fn sweep(cfg: &RunConfig, axis: &str, values: &[String], parallel: bool, out: Option<&Path>) -> Result<Vec<SweepPoint>> {
    let key = sweep_key(axis)?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let graph = load_graph(cfg)?;
    let point = |value: &String| -> Result<(SweepPoint, u128)> {
        let mut c = cfg.clone();
        c.set(key, value)?;
        if key == "n" && c.meta.span_size > c.meta.n {
            c.meta.span_size = c.meta.n;
        }
        let (report, ms) = train_and_eval(c, &graph, out, &format!("{key}={value}"))?;
        let p = SweepPoint {
            value: value.clone(),
            acc: report.acc,
            auc: report.auc,
            macro_f1: report.macro_f1,
        };
        Ok((p, ms))
    };
    let results: Vec<(SweepPoint, u128)> = if parallel {
        values.par_iter().map(point).collect::<Result<_>>()?
    } else {
        values.iter().map(point).collect::<Result<_>>()?
    };
    let mut timing = String::from("value,wall_ms\n");
    for (p, ms) in &results {
        let _ = writeln!(timing, "{},{ms}", p.value);
    }
    let points: Vec<SweepPoint> = results.into_iter().map(|(p, _)| p).collect();
    if let Some(dir) = out {
        let mut csv = format!("{key},acc,auc,macro_f1\n");
        for p in &points {
            let _ = writeln!(csv, "{},{},{},{}", p.value, p.acc, p.auc, p.macro_f1);
        }
        write(&dir.join("sweep.csv"), &csv)?;
        write(&dir.join("sweep.json"), &to_json(&points)?)?;
        write(&dir.join("sweep_timing.csv"), &timing)?;
    }
    Ok(points)
}

/// Runs the toy gradient check and writes `gradcheck.json`.
pub fn gradcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<super::gradcheck::GradcheckReport> {
    let report = super::gradcheck::run_toy(cfg.seed)?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write(&dir.join("gradcheck.json"), &to_json(&report)?)?;
    }
    Ok(report)
}
