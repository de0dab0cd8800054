//! Central-difference check of the outer gradient.
//!
//! The checked function is the query loss at the fused parameters of one
//! task, with that task's final span memory and the node shift in place. The
//! memory state is held fixed; its use-time GRU step still depends on the
//! perturbed parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diff::ParamSet;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{parse_csv, HeaderMode, IngestConfig, TemporalGraph};
use crate::meta::{self, Context, EventSet, MetaConfig, ModelConfig};
use crate::tasks::{build_test_tasks, NodeTask};

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-5;
const QUERY: usize = 6;

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub group: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Parameter group of a key, as reported.
pub fn group_of(key: &str) -> &'static str {
    match key {
        "encoder.w_s" => "encoder.input",
        "encoder.lambda" | "encoder.eta" => "encoder.time",
        "predictor.w_na" => "predictor.node_adapt",
        k if k.starts_with("encoder.gru") => "encoder.memory",
        k if k.starts_with("encoder.") => "encoder.attention",
        _ => "predictor.mlp",
    }
}

/// Relative error whose denominator never drops below the finite-difference
/// roundoff scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Seeded toy graph: 8 nodes, 3 node features, 2 edge features, 48 events.
pub fn toy_graph(seed: u64) -> Result<TemporalGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = String::from("src,dst,timestamp,f0,f1\n");
    let mut t = 0.0;
    for i in 0..48 {
        t += rng.gen_range(0.5..3.0);
        let src = if i % 3 == 0 { 0 } else { rng.gen_range(0..8) };
        let mut dst = rng.gen_range(0..8);
        if dst == src {
            dst = (dst + 1) % 8;
        }
        let _ = writeln!(events, "{src},{dst},{t},{},{}", rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    let mut nodes = String::new();
    for v in 0..8 {
        let _ = writeln!(nodes, "{v},{},{},{}", rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0));
    }
    let ingest = IngestConfig {
        header: HeaderMode::Present,
        d_x: 3,
        ..IngestConfig::default()
    };
    parse_csv(&events, Some(&nodes), &ingest)
}

pub fn toy_model(graph: &TemporalGraph) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_x: graph.d_x(),
            d_e: graph.d_e(),
            d: 4,
            d_t: 4,
            heads: 2,
            hops: 2,
            k: 3,
        },
        d_h: 5,
    }
}

pub fn toy_meta() -> MetaConfig {
    MetaConfig {
        lr1: 0.05,
        lr2: 0.05,
        inner_steps: 2,
        span_size: 2,
        n: 6,
        m: 3,
        ..MetaConfig::default()
    }
}

/// Compares the tape gradient against central differences over every
/// parameter entry.
pub fn check(ctx: Context<'_>, theta: &ParamSet, task: &NodeTask) -> Result<GradcheckReport> {
    let adapted = meta::adapt_task(ctx, theta, task)?;
    let memory = adapted.final_memory().clone();
    let query = EventSet {
        positives: &task.query,
        negatives: &task.query_negatives,
    };
    let fused = meta::fuse(ctx, &adapted, query)?.params;
    let shift = adapted.node_shift;
    let (_, grads) = meta::set_loss_grad(ctx, &fused, task.node, Some(&memory), shift, query)?;

    let mut worst: BTreeMap<&'static str, (usize, f64)> = BTreeMap::new();
    let keys: Vec<String> = fused.keys().map(str::to_string).collect();
    let mut probe = fused.clone();
    for key in &keys {
        let analytic = grads.require(key)?.data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let original = fused.require(key)?.data()[i];
            let mut at = |x: f64| -> Result<f64> {
                probe.get_mut(key).ok_or_else(|| Error::KeyMismatch(key.clone()))?.data_mut()[i] = x;
                meta::set_loss(ctx, &probe, task.node, Some(&memory), shift, query)
            };
            let numeric = (at(original + STEP)? - at(original - STEP)?) / (2.0 * STEP);
            at(original)?;
            let slot = worst.entry(group_of(key)).or_insert((0, 0.0));
            slot.0 += 1;
            slot.1 = slot.1.max(rel_err(a, numeric));
        }
    }
    let groups: Vec<GroupError> = worst
        .into_iter()
        .map(|(group, (entries, max_rel_err))| GroupError {
            group: group.to_string(),
            entries,
            max_rel_err,
        })
        .collect();
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        groups,
        max_rel_err,
        tolerance: TOLERANCE,
        pass: max_rel_err <= TOLERANCE,
    })
}

/// Runs [`check`] on the toy graph with memory, several spans and the node
/// shift enabled. The query set is capped so the loss, and with it the
/// roundoff of the differences, stays small.
pub fn run_toy(seed: u64) -> Result<GradcheckReport> {
    let graph = toy_graph(seed)?;
    let model = toy_model(&graph);
    let cfg = toy_meta();
    let ctx = Context {
        graph: &graph,
        model: &model,
        cfg: &cfg,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = meta::init_model(&model, &mut rng)?;
    let busiest = (0..graph.num_nodes())
        .max_by_key(|&v| graph.node_events(v).len())
        .ok_or(Error::Empty("toy graph"))?;
    let events = graph.node_events(busiest);
    let end = events.get(cfg.n + QUERY).map_or(graph.num_events(), |&e| e);
    let set = build_test_tasks(&graph, &[busiest], end, cfg.n, seed)?;
    let task = set.tasks.first().ok_or(Error::Empty("toy task"))?;
    check(ctx, &theta, task)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_gradient_matches_differences() {
        let report = run_toy(3).unwrap();
        let names: Vec<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(
            names,
            ["encoder.attention", "encoder.input", "encoder.memory", "encoder.time", "predictor.mlp", "predictor.node_adapt"]
        );
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn groups_cover_keys() {
        assert_eq!(group_of("encoder.gru.w_z"), "encoder.memory");
        assert_eq!(group_of("encoder.w_ts1"), "encoder.attention");
        assert_eq!(group_of("predictor.b2"), "predictor.mlp");
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((rel_err(0.0, 1e-9) - 1e-4).abs() < 1e-15);
    }
}
