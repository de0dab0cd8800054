//! Temporal interaction graphs: ingestion, indexing, neighbor queries and the
//! chronological train/validation/test split.
//!
//! Input rows follow the JODIE layout `src,dst,timestamp,state_label,f1,…`.
//! The binary cache written by [`TemporalGraph::to_bytes`] is little-endian:
//!
//! ```text
//! magic      4 bytes  b"DLPG"
//! version    u8       1
//! flags      u8       bit 0 = bipartite id namespaces
//! num_nodes  u64
//! d_e        u32
//! d_x        u32
//! num_events u64
//! raw ids    num_nodes × (u32 length, UTF-8 bytes)
//! node feats num_nodes × d_x f64
//! events     num_events × (u64 src, u64 dst, f64 timestamp, d_e × f64)
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diff::ByteReader;
use crate::error::{Error, Result};

pub const GRAPH_MAGIC: &[u8; 4] = b"DLPG";
pub const GRAPH_VERSION: u8 = 1;

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalEvent {
    pub src: NodeId,
    pub dst: NodeId,
    pub timestamp: f64,
    pub features: Vec<f64>,
    pub event_index: usize,
}

impl TemporalEvent {
    pub fn involves(&self, v: NodeId) -> bool {
        self.src == v || self.dst == v
    }

    /// The endpoint that is not `v`.
    pub fn counterpart(&self, v: NodeId) -> NodeId {
        if self.src == v {
            self.dst
        } else {
            self.src
        }
    }
}

/// One entry of a temporal neighborhood.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor<'g> {
    pub node: NodeId,
    pub features: &'g [f64],
    pub timestamp: f64,
    pub event_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum HeaderMode {
    /// Header present iff the timestamp field of the first line is not numeric.
    #[default]
    Auto,
    Present,
    Absent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestConfig {
    pub header: HeaderMode,
    /// Stable-sort rows by timestamp; when false, out-of-order rows are an
    /// error.
    pub sort: bool,
    /// Source and destination ids live in separate namespaces
    /// (user/item files such as the JODIE releases).
    pub bipartite: bool,
    /// Node-feature dimension used when no feature file is given.
    pub d_x: usize,
    /// Optional `raw_id,x1,…` file with per-node features.
    pub node_features: Option<PathBuf>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            header: HeaderMode::Auto,
            sort: true,
            bipartite: false,
            d_x: 1,
            node_features: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraph {
    events: Vec<TemporalEvent>,
    num_nodes: usize,
    d_e: usize,
    d_x: usize,
    node_features: Vec<f64>,
    adjacency: Vec<Vec<usize>>,
    raw_ids: Vec<String>,
    bipartite: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub num_nodes: usize,
    pub num_events: usize,
    pub d_e: usize,
    pub d_x: usize,
    pub t_min: f64,
    pub t_max: f64,
}

/// Raw event used to assemble a graph before indexing.
#[derive(Clone, Debug)]
pub struct RawEvent {
    pub src: NodeId,
    pub dst: NodeId,
    pub timestamp: f64,
    pub features: Vec<f64>,
}

impl TemporalGraph {
    /// Builds and validates a graph from events already in chronological
    /// order. `node_features` is row-major `num_nodes × d_x`.
    pub fn from_sorted_events(
        raw: Vec<RawEvent>,
        num_nodes: usize,
        d_e: usize,
        node_features: Vec<f64>,
        d_x: usize,
        raw_ids: Vec<String>,
        bipartite: bool,
    ) -> Result<Self> {
        if node_features.len() != num_nodes * d_x {
            return Err(Error::Format(format!(
                "node feature table has {} values, expected {}",
                node_features.len(),
                num_nodes * d_x
            )));
        }
        if raw_ids.len() != num_nodes {
            return Err(Error::Format("raw id table length differs from node count".into()));
        }
        let mut adjacency = vec![Vec::new(); num_nodes];
        let mut events = Vec::with_capacity(raw.len());
        let mut last_t = f64::NEG_INFINITY;
        for (i, e) in raw.into_iter().enumerate() {
            if e.src >= num_nodes {
                return Err(Error::UnknownNode(e.src));
            }
            if e.dst >= num_nodes {
                return Err(Error::UnknownNode(e.dst));
            }
            if e.features.len() != d_e {
                return Err(Error::FeatureArity {
                    line: i + 1,
                    expected: d_e,
                    found: e.features.len(),
                });
            }
            if !e.timestamp.is_finite() || e.timestamp < last_t {
                return Err(Error::Unsorted {
                    line: i + 1,
                    timestamp: e.timestamp,
                });
            }
            last_t = e.timestamp;
            adjacency[e.src].push(i);
            if e.dst != e.src {
                adjacency[e.dst].push(i);
            }
            events.push(TemporalEvent {
                src: e.src,
                dst: e.dst,
                timestamp: e.timestamp,
                features: e.features,
                event_index: i,
            });
        }
        Ok(Self {
            events,
            num_nodes,
            d_e,
            d_x,
            node_features,
            adjacency,
            raw_ids,
            bipartite,
        })
    }

    pub fn events(&self) -> &[TemporalEvent] {
        &self.events
    }

    pub fn event(&self, index: usize) -> &TemporalEvent {
        &self.events[index]
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn is_bipartite(&self) -> bool {
        self.bipartite
    }

    pub fn raw_id(&self, v: NodeId) -> &str {
        &self.raw_ids[v]
    }

    pub fn node_features(&self, v: NodeId) -> &[f64] {
        &self.node_features[v * self.d_x..(v + 1) * self.d_x]
    }

    /// Event indices involving `v`, in chronological order.
    pub fn node_events(&self, v: NodeId) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn first_event(&self, v: NodeId) -> Option<usize> {
        self.adjacency[v].first().copied()
    }

    /// The `k` most recent events involving `v` strictly before `t`, most
    /// recent first.
    pub fn temporal_neighbors(&self, v: NodeId, t: f64, k: usize) -> Result<Vec<Neighbor<'_>>> {
        if v >= self.num_nodes {
            return Err(Error::UnknownNode(v));
        }
        let adj = &self.adjacency[v];
        let end = adj.partition_point(|&e| self.events[e].timestamp < t);
        let start = end.saturating_sub(k);
        Ok(adj[start..end]
            .iter()
            .rev()
            .map(|&e| {
                let ev = &self.events[e];
                Neighbor {
                    node: ev.counterpart(v),
                    features: &ev.features,
                    timestamp: ev.timestamp,
                    event_index: e,
                }
            })
            .collect())
    }

    pub fn summary(&self) -> GraphSummary {
        GraphSummary {
            num_nodes: self.num_nodes,
            num_events: self.events.len(),
            d_e: self.d_e,
            d_x: self.d_x,
            t_min: self.events.first().map_or(0.0, |e| e.timestamp),
            t_max: self.events.last().map_or(0.0, |e| e.timestamp),
        }
    }

    /// Rebuilds the adjacency index by rescanning the event list and
    /// compares it with the stored one.
    pub fn adjacency_consistent(&self) -> bool {
        let mut fresh = vec![Vec::new(); self.num_nodes];
        for (i, e) in self.events.iter().enumerate() {
            if e.event_index != i {
                return false;
            }
            fresh[e.src].push(i);
            if e.dst != e.src {
                fresh[e.dst].push(i);
            }
        }
        fresh == self.adjacency
    }

    fn write_raw_id(&self, v: NodeId) -> &str {
        let id = self.raw_ids[v].as_str();
        if self.bipartite {
            id.split_once(':').map_or(id, |(_, rest)| rest)
        } else {
            id
        }
    }

    /// Events in the ingest layout, with raw ids and shifted timestamps.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let _ = write!(
                out,
                "{},{},{},0",
                self.write_raw_id(e.src),
                self.write_raw_id(e.dst),
                e.timestamp
            );
            for f in &e.features {
                let _ = write!(out, ",{f}");
            }
            out.push('\n');
        }
        out
    }

    /// Node features as `raw_id,x1,…` rows.
    pub fn node_features_csv(&self) -> String {
        let mut out = String::new();
        for v in 0..self.num_nodes {
            out.push_str(&self.raw_ids[v]);
            for x in self.node_features(v) {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GRAPH_MAGIC);
        out.push(GRAPH_VERSION);
        out.push(u8::from(self.bipartite));
        out.extend_from_slice(&(self.num_nodes as u64).to_le_bytes());
        out.extend_from_slice(&(self.d_e as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_x as u32).to_le_bytes());
        out.extend_from_slice(&(self.events.len() as u64).to_le_bytes());
        for id in &self.raw_ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for x in &self.node_features {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for e in &self.events {
            out.extend_from_slice(&(e.src as u64).to_le_bytes());
            out.extend_from_slice(&(e.dst as u64).to_le_bytes());
            out.extend_from_slice(&e.timestamp.to_le_bytes());
            for f in &e.features {
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != GRAPH_MAGIC {
            return Err(Error::Format("bad graph cache magic".into()));
        }
        let version = r.take(1)?[0];
        if version != GRAPH_VERSION {
            return Err(Error::Format(format!("unsupported graph cache version {version}")));
        }
        let bipartite = r.take(1)?[0] & 1 == 1;
        let num_nodes = r.u64()? as usize;
        let d_e = r.u32()? as usize;
        let d_x = r.u32()? as usize;
        let num_events = r.u64()? as usize;
        let mut raw_ids = Vec::with_capacity(num_nodes);
        for _ in 0..num_nodes {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("raw id is not UTF-8".into()))?;
            raw_ids.push(id.to_string());
        }
        let mut node_features = Vec::with_capacity(num_nodes * d_x);
        for _ in 0..num_nodes * d_x {
            node_features.push(r.f64()?);
        }
        let mut raw = Vec::with_capacity(num_events);
        for _ in 0..num_events {
            let src = r.u64()? as usize;
            let dst = r.u64()? as usize;
            let timestamp = r.f64()?;
            let mut features = Vec::with_capacity(d_e);
            for _ in 0..d_e {
                features.push(r.f64()?);
            }
            raw.push(RawEvent {
                src,
                dst,
                timestamp,
                features,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after graph cache".into()));
        }
        Self::from_sorted_events(raw, num_nodes, d_e, node_features, d_x, raw_ids, bipartite)
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn looks_numeric(field: &str) -> bool {
    field.trim().parse::<f64>().is_ok()
}

/// Reads a JODIE-style event file.
pub fn load_csv(path: &Path, config: &IngestConfig) -> Result<TemporalGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let node_text = match &config.node_features {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    parse_csv(&text, node_text.as_deref(), config)
}

/// [`load_csv`] over in-memory text.
pub fn parse_csv(text: &str, node_text: Option<&str>, config: &IngestConfig) -> Result<TemporalGraph> {
    struct Row {
        line: usize,
        src: String,
        dst: String,
        timestamp: f64,
        features: Vec<f64>,
    }
    let mut rows: Vec<Row> = Vec::new();
    let mut d_e: Option<usize> = None;
    let mut first_line = true;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if first_line {
            first_line = false;
            let header = match config.header {
                HeaderMode::Present => true,
                HeaderMode::Absent => false,
                HeaderMode::Auto => fields.len() < 3 || !looks_numeric(fields[2]),
            };
            if header {
                continue;
            }
        }
        if fields.len() < 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected at least 4 columns, found {}", fields.len()),
            });
        }
        let arity = fields.len() - 4;
        match d_e {
            None => d_e = Some(arity),
            Some(expected) if expected != arity => {
                return Err(Error::FeatureArity {
                    line: line_no,
                    expected,
                    found: arity,
                })
            }
            _ => {}
        }
        let timestamp: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad timestamp {:?}", fields[2]),
        })?;
        if !timestamp.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                message: "non-finite timestamp".into(),
            });
        }
        let features = fields[4..]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        message: format!("bad feature value {f:?}"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let (src_key, dst_key) = if config.bipartite {
            (format!("src:{}", fields[0].trim()), format!("dst:{}", fields[1].trim()))
        } else {
            (fields[0].trim().to_string(), fields[1].trim().to_string())
        };
        if src_key.is_empty() || dst_key.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty node id".into(),
            });
        }
        rows.push(Row {
            line: line_no,
            src: src_key,
            dst: dst_key,
            timestamp,
            features,
        });
    }

    if config.sort {
        rows.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    } else {
        for pair in rows.windows(2) {
            if pair[1].timestamp < pair[0].timestamp {
                return Err(Error::Unsorted {
                    line: pair[1].line,
                    timestamp: pair[1].timestamp,
                });
            }
        }
    }

    // dense ids follow chronological first appearance
    let mut ids: HashMap<String, NodeId> = HashMap::new();
    let mut raw_ids: Vec<String> = Vec::new();
    let mut intern = |key: String| -> NodeId {
        if let Some(&id) = ids.get(&key) {
            return id;
        }
        ids.insert(key.clone(), raw_ids.len());
        raw_ids.push(key);
        raw_ids.len() - 1
    };
    let t0 = rows.first().map_or(0.0, |r| r.timestamp);
    let events: Vec<RawEvent> = rows
        .into_iter()
        .map(|r| RawEvent {
            src: intern(r.src),
            dst: intern(r.dst),
            timestamp: r.timestamp - t0,
            features: r.features,
        })
        .collect();

    let num_nodes = raw_ids.len();
    let (node_features, d_x) = match node_text {
        Some(text) => parse_node_features(text, &ids, num_nodes)?,
        None => (vec![0.0; num_nodes * config.d_x], config.d_x),
    };
    TemporalGraph::from_sorted_events(
        events,
        num_nodes,
        d_e.unwrap_or(0),
        node_features,
        d_x,
        raw_ids,
        config.bipartite,
    )
}

fn parse_node_features(
    text: &str,
    ids: &HashMap<String, NodeId>,
    num_nodes: usize,
) -> Result<(Vec<f64>, usize)> {
    let mut d_x: Option<usize> = None;
    let mut rows: Vec<(NodeId, Vec<f64>)> = Vec::new();
    let mut first = true;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if first {
            first = false;
            if fields.len() > 1 && !looks_numeric(fields[1]) {
                continue;
            }
        }
        let values = fields[1..]
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("bad node feature {f:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match d_x {
            None => d_x = Some(values.len()),
            Some(n) if n != values.len() => {
                return Err(Error::FeatureArity {
                    line: line_no,
                    expected: n,
                    found: values.len(),
                })
            }
            _ => {}
        }
        let node = *ids.get(fields[0].trim()).ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("node {:?} does not occur in the event file", fields[0]),
        })?;
        rows.push((node, values));
    }
    let d_x = d_x.unwrap_or(0);
    let mut table = vec![0.0; num_nodes * d_x];
    for (node, values) in rows {
        table[node * d_x..(node + 1) * d_x].copy_from_slice(&values);
    }
    Ok((table, d_x))
}

/// Contiguous chronological partition of the event stream plus the
/// first-appearance node sets of each part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChronoSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub train_nodes: Vec<NodeId>,
    pub val_new_nodes: Vec<NodeId>,
    pub test_new_nodes: Vec<NodeId>,
}

impl ChronoSplit {
    pub fn new(graph: &TemporalGraph, ratios: [f64; 3]) -> Result<Self> {
        if ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::Config(format!("split ratios must be positive: {ratios:?}")));
        }
        let total: f64 = ratios.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {total}, not 1")));
        }
        let n = graph.num_events();
        if n < 3 {
            return Err(Error::Empty("split needs at least 3 events"));
        }
        let nf = n as f64;
        let train_end = ((ratios[0] * nf).round() as usize).clamp(1, n - 2);
        let val_end = (((ratios[0] + ratios[1]) * nf).round() as usize).clamp(train_end + 1, n - 1);

        let mut train_nodes = Vec::new();
        let mut val_new_nodes = Vec::new();
        let mut test_new_nodes = Vec::new();
        for v in 0..graph.num_nodes() {
            let Some(first) = graph.first_event(v) else { continue };
            if first < train_end {
                train_nodes.push(v);
            } else if first < val_end {
                val_new_nodes.push(v);
            } else {
                test_new_nodes.push(v);
            }
        }
        Ok(Self {
            train: 0..train_end,
            val: train_end..val_end,
            test: val_end..n,
            train_nodes,
            val_new_nodes,
            test_new_nodes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> IngestConfig {
        IngestConfig::default()
    }

    #[test]
    fn loads_rows_and_densifies_ids() {
        let text = "user_id,item_id,timestamp,state_label,f\n\
                    10,20,5.0,0,0.5\n\
                    20,30,7.5,0,1.5\n\
                    10,30,9.0,1,2.5\n";
        let g = parse_csv(text, None, &cfg()).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_events(), 3);
        assert_eq!(g.d_e(), 1);
        assert_eq!(g.raw_id(0), "10");
        assert_eq!(g.raw_id(2), "30");
        assert_eq!(g.events()[0].timestamp, 0.0);
        assert_eq!(g.events()[2].timestamp, 4.0);
        assert_eq!(g.node_features(1), &[0.0]);
        assert!(g.adjacency_consistent());
    }

    #[test]
    fn zero_feature_columns_load() {
        let g = parse_csv("0,1,1,0\n1,2,2,0\n", None, &cfg()).unwrap();
        assert_eq!(g.d_e(), 0);
        assert!(g.events().iter().all(|e| e.features.is_empty()));
    }

    #[test]
    fn out_of_order_rows_are_stably_sorted() {
        let text = "a,b,3,0,1\nb,c,1,0,2\nc,a,1,0,3\n";
        let g = parse_csv(text, None, &cfg()).unwrap();
        // brute-force rescan of the raw rows: order by timestamp, ties by line
        let mut raw: Vec<(f64, usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (l.split(',').nth(2).unwrap().parse().unwrap(), i, l))
            .collect();
        raw.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for (e, (_, _, line)) in g.events().iter().zip(&raw) {
            let f: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
            assert_eq!(e.features, vec![f]);
            assert_eq!(g.raw_id(e.src), line.split(',').next().unwrap());
        }
        assert!(g.adjacency_consistent());
        assert_eq!(g.raw_id(0), "b");
        assert_eq!(g.node_events(0), &[0, 2]);
    }

    #[test]
    fn unsorted_input_rejected_without_sorting() {
        let config = IngestConfig {
            sort: false,
            ..cfg()
        };
        let err = parse_csv("a,b,3,0\nb,c,1,0\n", None, &config).unwrap_err();
        assert!(matches!(err, Error::Unsorted { line: 2, .. }));
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        assert!(matches!(
            parse_csv("0,1,1,0\n0,1\n", None, &cfg()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_csv("0,1,1,0,1.0\n0,1,2,0\n", None, &cfg()),
            Err(Error::FeatureArity { line: 2, expected: 1, found: 0 })
        ));
        assert!(matches!(
            parse_csv("0,1,1,0\n0,1,x,0\n", None, &cfg()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn bipartite_namespaces_are_separate() {
        let config = IngestConfig {
            bipartite: true,
            ..cfg()
        };
        let g = parse_csv("0,0,1,0\n1,0,2,0\n", None, &config).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.to_csv(), "0,0,0,0\n1,0,1,0\n");
    }

    #[test]
    fn node_feature_file_is_applied() {
        let g = parse_csv("a,b,1,0\nb,c,2,0\n", Some("id,x1,x2\nb,1,2\nc,3,4\n"), &cfg()).unwrap();
        assert_eq!(g.d_x(), 2);
        assert_eq!(g.node_features(0), &[0.0, 0.0]);
        assert_eq!(g.node_features(1), &[1.0, 2.0]);
        assert!(parse_csv("a,b,1,0\n", Some("zz,1\n"), &cfg()).is_err());
    }

    #[test]
    fn neighbor_edge_cases() {
        let g = parse_csv("0,1,1,0\n0,2,2,0\n1,2,3,0\n", None, &cfg()).unwrap();
        assert!(g.temporal_neighbors(0, 0.0, 8).unwrap().is_empty());
        let n = g.temporal_neighbors(0, 0.5, 8).unwrap();
        assert_eq!(n.len(), 1);
        assert_eq!(n[0].node, 1);
        let n = g.temporal_neighbors(2, 10.0, 8).unwrap();
        assert_eq!(n.iter().map(|x| x.node).collect::<Vec<_>>(), vec![1, 0]);
        assert!(matches!(g.temporal_neighbors(9, 1.0, 1), Err(Error::UnknownNode(9))));
    }

    fn random_graph(seed: u64, nodes: usize, events: usize) -> TemporalGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text = String::new();
        for _ in 0..events {
            let a = rng.gen_range(0..nodes);
            let b = rng.gen_range(0..nodes);
            let t = rng.gen_range(0..40);
            text.push_str(&format!("{a},{b},{t},0,{}\n", rng.gen_range(-1.0..1.0)));
        }
        parse_csv(&text, None, &cfg()).unwrap()
    }

    #[test]
    fn neighbors_match_linear_scan() {
        let g = random_graph(4, 8, 50);
        for v in 0..g.num_nodes() {
            for t in [0.0, 3.0, 10.5, 17.0, 40.0] {
                for k in [1, 2, 5, 50] {
                    let mut expected: Vec<&TemporalEvent> =
                        g.events().iter().filter(|e| e.involves(v) && e.timestamp < t).collect();
                    expected.reverse();
                    expected.truncate(k);
                    let got = g.temporal_neighbors(v, t, k).unwrap();
                    assert_eq!(got.len(), expected.len());
                    for (n, e) in got.iter().zip(expected) {
                        assert_eq!(n.event_index, e.event_index);
                        assert_eq!(n.node, e.counterpart(v));
                        assert!(n.timestamp < t);
                    }
                }
            }
        }
    }

    #[test]
    fn split_toy_ranges() {
        let text: String = (0..10).map(|i| format!("{},{},{i},0\n", i, i + 1)).collect();
        let g = parse_csv(&text, None, &cfg()).unwrap();
        let s = ChronoSplit::new(&g, [0.6, 0.2, 0.2]).unwrap();
        assert_eq!((s.train.clone(), s.val.clone(), s.test.clone()), (0..6, 6..8, 8..10));
        // node "8" first appears as dst of event 7
        let n8 = (0..g.num_nodes()).find(|&v| g.raw_id(v) == "8").unwrap();
        assert_eq!(g.first_event(n8), Some(7));
        assert!(s.val_new_nodes.contains(&n8));
    }

    #[test]
    fn split_errors() {
        let g = parse_csv("0,1,1,0\n1,2,2,0\n", None, &cfg()).unwrap();
        assert!(ChronoSplit::new(&g, [0.6, 0.2, 0.2]).is_err());
        let g = random_graph(1, 5, 20);
        assert!(ChronoSplit::new(&g, [0.6, 0.3, 0.2]).is_err());
        assert!(ChronoSplit::new(&g, [0.8, 0.3, -0.1]).is_err());
    }

    #[test]
    fn split_new_nodes_match_first_appearance_scan() {
        let g = random_graph(77, 300, 1000);
        let s = ChronoSplit::new(&g, [0.6, 0.2, 0.2]).unwrap();
        let mut first = vec![usize::MAX; g.num_nodes()];
        for (i, e) in g.events().iter().enumerate() {
            first[e.src] = first[e.src].min(i);
            first[e.dst] = first[e.dst].min(i);
        }
        let val: Vec<usize> = (0..g.num_nodes()).filter(|&v| s.val.contains(&first[v])).collect();
        let test: Vec<usize> = (0..g.num_nodes()).filter(|&v| first[v] >= s.val.end).collect();
        assert_eq!(s.val_new_nodes, val);
        assert_eq!(s.test_new_nodes, test);
        assert!(!test.is_empty());
    }

    proptest! {
        #[test]
        fn split_ranges_partition_stream(a in 0.05f64..1.0, b in 0.05f64..1.0, c in 0.05f64..1.0, n in 3usize..60) {
            let total = a + b + c;
            let text: String = (0..n).map(|i| format!("{},{},{i},0\n", i % 7, (i * 3) % 11 + 7)).collect();
            let g = parse_csv(&text, None, &cfg()).unwrap();
            let s = ChronoSplit::new(&g, [a / total, b / total, 1.0 - a / total - b / total]).unwrap();
            prop_assert_eq!(s.train.start, 0);
            prop_assert_eq!(s.train.end, s.val.start);
            prop_assert_eq!(s.val.end, s.test.start);
            prop_assert_eq!(s.test.end, n);
            prop_assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty());
            for v in &s.val_new_nodes {
                prop_assert!(!s.test_new_nodes.contains(v));
                prop_assert!(!s.train_nodes.contains(v));
            }
            for v in &s.test_new_nodes {
                prop_assert!(!s.train_nodes.contains(v));
            }
        }

        #[test]
        fn cache_roundtrip_is_identity(seed in 0u64..1000, nodes in 2usize..12, events in 1usize..40) {
            let g = random_graph(seed, nodes, events);
            let back = TemporalGraph::from_bytes(&g.to_bytes()).unwrap();
            prop_assert_eq!(&back, &g);
            let reparsed = parse_csv(&g.to_csv(), Some(&g.node_features_csv()), &IngestConfig { d_x: g.d_x(), ..cfg() }).unwrap();
            prop_assert_eq!(reparsed.events(), g.events());
        }

        #[test]
        fn neighbors_are_causal(seed in 0u64..500, t in 0.0f64..45.0, k in 1usize..10) {
            let g = random_graph(seed, 6, 30);
            for v in 0..g.num_nodes() {
                for n in g.temporal_neighbors(v, t, k).unwrap() {
                    prop_assert!(n.timestamp < t);
                    prop_assert!(g.event(n.event_index).involves(v));
                }
            }
        }
    }
}
