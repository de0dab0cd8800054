//! Node-level episodic tasks: consecutive support/query events, span
//! partitions of the support set and 1:1 negative samples.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ChronoSplit, NodeId, TemporalEvent, TemporalGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeSample {
    pub src: NodeId,
    pub dst: NodeId,
    pub timestamp: f64,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTask {
    pub node: NodeId,
    pub support: Vec<TemporalEvent>,
    pub query: Vec<TemporalEvent>,
    pub support_negatives: Vec<NegativeSample>,
    pub query_negatives: Vec<NegativeSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanPartition {
    pub span_size: usize,
    pub spans: Vec<Vec<TemporalEvent>>,
}

impl SpanPartition {
    pub fn num_spans(&self) -> usize {
        self.spans.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskSet {
    pub tasks: Vec<NodeTask>,
    /// Candidate nodes without enough events.
    pub skipped: usize,
}

/// Which training-range nodes may yield meta-training tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TrainNodes {
    #[default]
    All,
    /// Only nodes whose first event falls in the second half of the
    /// training range.
    LateArrivals,
}

/// SplitMix64 finalizer folded over `parts`; stable across platforms.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;

/// Uniform over `0..num_nodes` minus `v` and `counterpart`, without
/// rejection.
fn sample_negative(rng: &mut ChaCha8Rng, num_nodes: usize, v: NodeId, counterpart: NodeId) -> NodeId {
    let (lo, hi) = if v <= counterpart { (v, counterpart) } else { (counterpart, v) };
    let excluded = if lo == hi { 1 } else { 2 };
    let mut r = rng.gen_range(0..num_nodes - excluded);
    if r >= lo {
        r += 1;
    }
    if lo != hi && r >= hi {
        r += 1;
    }
    r
}

fn negatives_for(
    rng: &mut ChaCha8Rng,
    graph: &TemporalGraph,
    v: NodeId,
    positives: &[TemporalEvent],
) -> Vec<NegativeSample> {
    positives
        .iter()
        .map(|e| NegativeSample {
            src: v,
            dst: sample_negative(rng, graph.num_nodes(), v, e.counterpart(v)),
            timestamp: e.timestamp,
            features: vec![0.0; graph.d_e()],
        })
        .collect()
}

fn check_counts(graph: &TemporalGraph, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("support size must be at least 1".into()));
    }
    if graph.num_nodes() < 3 {
        return Err(Error::Empty("negative sampling needs at least 3 nodes"));
    }
    Ok(())
}

/// Events of `v` with stream index below `end`, in order.
fn events_before(graph: &TemporalGraph, v: NodeId, end: usize) -> impl Iterator<Item = &TemporalEvent> {
    graph
        .node_events(v)
        .iter()
        .take_while(move |&&e| e < end)
        .map(|&e| graph.event(e))
}

/// One task per eligible training-range node with at least `n + m` events
/// in that range. `epoch` selects a fresh negative stream.
pub fn build_train_tasks(
    graph: &TemporalGraph,
    split: &ChronoSplit,
    n: usize,
    m: usize,
    seed: u64,
    epoch: u64,
    nodes: TrainNodes,
) -> Result<TaskSet> {
    check_counts(graph, n)?;
    if m == 0 {
        return Err(Error::Config("query size must be at least 1".into()));
    }
    let end = split.train.end;
    let mut set = TaskSet::default();
    for &v in &split.train_nodes {
        if nodes == TrainNodes::LateArrivals && graph.first_event(v).is_some_and(|f| f < end / 2) {
            continue;
        }
        let events: Vec<TemporalEvent> = events_before(graph, v, end).take(n + m).cloned().collect();
        if events.len() < n + m {
            set.skipped += 1;
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, STREAM_TRAIN, epoch, v as u64]));
        let (support, query) = events.split_at(n);
        set.tasks.push(NodeTask {
            node: v,
            support_negatives: negatives_for(&mut rng, graph, v, support),
            query_negatives: negatives_for(&mut rng, graph, v, query),
            support: support.to_vec(),
            query: query.to_vec(),
        });
    }
    Ok(set)
}

/// One evaluation task per node in `nodes` with more than `n` events below
/// stream index `end`; the query holds every event after the support set.
pub fn build_test_tasks(
    graph: &TemporalGraph,
    nodes: &[NodeId],
    end: usize,
    n: usize,
    seed: u64,
) -> Result<TaskSet> {
    check_counts(graph, n)?;
    let mut set = TaskSet::default();
    for &v in nodes {
        if v >= graph.num_nodes() {
            return Err(Error::UnknownNode(v));
        }
        let events: Vec<TemporalEvent> = events_before(graph, v, end).cloned().collect();
        if events.len() <= n {
            set.skipped += 1;
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, STREAM_EVAL, v as u64]));
        let (support, query) = events.split_at(n);
        set.tasks.push(NodeTask {
            node: v,
            support_negatives: negatives_for(&mut rng, graph, v, support),
            query_negatives: negatives_for(&mut rng, graph, v, query),
            support: support.to_vec(),
            query: query.to_vec(),
        });
    }
    Ok(set)
}

/// `floor(N / i)` consecutive spans of `i` support events; the remainder is
/// dropped.
pub fn partition_spans(task: &NodeTask, span_size: usize) -> Result<SpanPartition> {
    let n = task.support.len();
    if span_size == 0 || span_size > n {
        return Err(Error::Config(format!(
            "span size {span_size} outside 1..={n}"
        )));
    }
    Ok(SpanPartition {
        span_size,
        spans: task.support.chunks_exact(span_size).map(<[_]>::to_vec).collect(),
    })
}

impl NodeTask {
    /// Negatives paired with the events of span `r` of a partition with span
    /// size `span_size`.
    pub fn span_negatives(&self, span_size: usize, r: usize) -> &[NegativeSample] {
        &self.support_negatives[r * span_size..(r + 1) * span_size]
    }
}

/// One JSON object per task.
pub fn to_jsonl(tasks: &[NodeTask]) -> Result<String> {
    let mut out = String::new();
    for t in tasks {
        let line = serde_json::to_string(t).map_err(|e| Error::Format(e.to_string()))?;
        let _ = writeln!(out, "{line}");
    }
    Ok(out)
}
