//! Time-aware node embeddings: functional time encoding, multi-head temporal
//! attention over causal neighbors, and per-task span memory.
//!
//! Shapes, with `d_a = d + d_t + d_e`:
//!
//! ```text
//! encoder.w_s    [d_x, d]      encoder.w_ts2  [d, d]
//! encoder.w_q    [d + d_t, d]  encoder.w_ts1  [2d, d]
//! encoder.w_k    [d_a, d]      encoder.w_o    [2d, d]
//! encoder.w_v    [d_a, d]      encoder.lambda [1, d_t/2]
//! encoder.gru.*  input 2d + d_e + d_t, hidden d
//! encoder.eta    [1, d_t/2]
//! ```

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{GruVars, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{NodeId, TemporalEvent, TemporalGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_x: usize,
    pub d_e: usize,
    pub d: usize,
    pub d_t: usize,
    pub heads: usize,
    pub hops: usize,
    /// Temporal neighbors aggregated per node.
    pub k: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_x == 0 {
            return Err(Error::Config("d and d_x must be positive".into()));
        }
        if self.d_t == 0 || self.d_t % 2 != 0 {
            return Err(Error::Config(format!("d_t = {} must be even and positive", self.d_t)));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("heads = {} must divide d = {}", self.heads, self.d)));
        }
        if self.hops == 0 || self.k == 0 {
            return Err(Error::Config("hops and k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn attention_input(&self) -> usize {
        self.d + self.d_t + self.d_e
    }

    pub fn memory_input(&self) -> usize {
        2 * self.d + self.d_e + self.d_t
    }
}

pub const ENCODER_PREFIX: &str = "encoder.";
const GRU_PREFIX: &str = "encoder.gru";

/// Uniform fan-in weights, zero GRU biases and a geometric frequency ladder
/// `λ_k = η_k = 10^(−4k/d_t)`.
pub fn init_params<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    let d = cfg.d;
    let mut p = ParamSet::new();
    let weight = |p: &mut ParamSet, key: &str, rows: usize, cols: usize, rng: &mut R| {
        p.insert(key, ParamSet::uniform_weight(rng, rows, cols))
    };
    weight(&mut p, "encoder.w_s", cfg.d_x, d, rng)?;
    weight(&mut p, "encoder.w_q", d + cfg.d_t, d, rng)?;
    weight(&mut p, "encoder.w_k", cfg.attention_input(), d, rng)?;
    weight(&mut p, "encoder.w_v", cfg.attention_input(), d, rng)?;
    weight(&mut p, "encoder.w_ts2", d, d, rng)?;
    weight(&mut p, "encoder.w_ts1", 2 * d, d, rng)?;
    weight(&mut p, "encoder.w_o", 2 * d, d, rng)?;
    let ladder: Vec<f64> = (0..cfg.d_t / 2)
        .map(|k| 10f64.powf(-4.0 * k as f64 / cfg.d_t as f64))
        .collect();
    p.insert("encoder.lambda", Tensor::row(ladder.clone()))?;
    p.insert("encoder.eta", Tensor::row(ladder))?;
    for gate in ["z", "r", "n"] {
        weight(&mut p, &format!("{GRU_PREFIX}.w_{gate}"), cfg.memory_input(), d, rng)?;
        weight(&mut p, &format!("{GRU_PREFIX}.u_{gate}"), d, d, rng)?;
        p.insert(format!("{GRU_PREFIX}.b_{gate}"), Tensor::zeros(&[1, d]))?;
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w_s: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_ts1: Var,
    pub w_ts2: Var,
    pub w_o: Var,
    pub lambda: Var,
    pub eta: Var,
    pub gru: GruVars,
}

impl EncoderVars {
    pub fn register(tape: &mut Tape, params: &ParamSet, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.d;
        let expect = |key: &str, shape: [usize; 2]| -> Result<()> {
            let t = params.require(key)?;
            if t.shape() != shape {
                return Err(Error::shape("encoder", format!("{key} is {:?}, expected {shape:?}", t.shape())));
            }
            Ok(())
        };
        expect("encoder.w_s", [cfg.d_x, d])?;
        expect("encoder.w_q", [d + cfg.d_t, d])?;
        expect("encoder.w_k", [cfg.attention_input(), d])?;
        expect("encoder.w_v", [cfg.attention_input(), d])?;
        expect("encoder.w_ts2", [d, d])?;
        expect("encoder.w_ts1", [2 * d, d])?;
        expect("encoder.w_o", [2 * d, d])?;
        expect("encoder.lambda", [1, cfg.d_t / 2])?;
        expect("encoder.eta", [1, cfg.d_t / 2])?;
        expect("encoder.gru.w_z", [cfg.memory_input(), d])?;
        Ok(Self {
            w_s: tape.param(params, "encoder.w_s")?,
            w_q: tape.param(params, "encoder.w_q")?,
            w_k: tape.param(params, "encoder.w_k")?,
            w_v: tape.param(params, "encoder.w_v")?,
            w_ts1: tape.param(params, "encoder.w_ts1")?,
            w_ts2: tape.param(params, "encoder.w_ts2")?,
            w_o: tape.param(params, "encoder.w_o")?,
            lambda: tape.param(params, "encoder.lambda")?,
            eta: tape.param(params, "encoder.eta")?,
            gru: GruVars::register(tape, params, GRU_PREFIX)?,
        })
    }
}

/// `Φ(Δt)` for a column of deltas: rows of interleaved
/// `cos(λ_k Δt), sin(η_k Δt)` scaled by `√(1/(d_t/2))`.
pub fn time_encode_var(tape: &mut Tape, vars: &EncoderVars, dts: &[f64]) -> Result<Var> {
    let col = tape.constant(Tensor::column(dts.to_vec()))?;
    let half = tape.value(vars.lambda).cols();
    let a = tape.matmul(col, vars.lambda)?;
    let b = tape.matmul(col, vars.eta)?;
    let c = tape.cos(a)?;
    let s = tape.sin(b)?;
    let phi = tape.interleave_cols(c, s)?;
    tape.scale(phi, (1.0 / half as f64).sqrt())
}

pub fn time_encode(params: &ParamSet, cfg: &EncoderConfig, dt: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = EncoderVars::register(&mut tape, params, cfg)?;
    let phi = time_encode_var(&mut tape, &vars, &[dt])?;
    Ok(tape.value(phi).data().to_vec())
}

/// Span memory of a single task node.
///
/// The memory used for the next span is `gru(base, input)` evaluated with
/// whatever parameters are on the tape, so the GRU receives gradients
/// through the most recent update; `base` itself is a constant.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanMemoryState {
    pub node: NodeId,
    base: Option<Tensor>,
    input: Option<Tensor>,
    pub last_time: f64,
    pub spans: usize,
}

impl SpanMemoryState {
    pub fn new(node: NodeId) -> Self {
        Self {
            node,
            base: None,
            input: None,
            last_time: 0.0,
            spans: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_none()
    }

    /// Memory as a tape value, `None` before the first update.
    pub fn memory_var(&self, tape: &mut Tape, vars: &EncoderVars) -> Result<Option<Var>> {
        let (Some(base), Some(input)) = (&self.base, &self.input) else {
            return Ok(None);
        };
        let h = tape.constant(base.clone())?;
        let x = tape.constant(input.clone())?;
        tape.gru_cell(h, x, &vars.gru).map(Some)
    }

    /// Memory value under `params`; zeros before the first update.
    pub fn value(&self, params: &ParamSet, cfg: &EncoderConfig) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = EncoderVars::register(&mut tape, params, cfg)?;
        Ok(match self.memory_var(&mut tape, &vars)? {
            Some(m) => tape.value(m).clone(),
            None => Tensor::zeros(&[1, cfg.d]),
        })
    }

    /// `m ← gru(m, [z_v ‖ z_j ‖ f ‖ Φ(t − t⁻)])`, with the current memory
    /// and `Φ` evaluated under `params`.
    pub fn update(
        &mut self,
        params: &ParamSet,
        cfg: &EncoderConfig,
        event: &TemporalEvent,
        z_v: &[f64],
        z_j: &[f64],
    ) -> Result<()> {
        if !event.involves(self.node) {
            return Err(Error::Format(format!(
                "span event {} does not involve node {}",
                event.event_index, self.node
            )));
        }
        if z_v.len() != cfg.d || z_j.len() != cfg.d || event.features.len() != cfg.d_e {
            return Err(Error::shape("update_span_memory", "embedding or feature width"));
        }
        let current = self.value(params, cfg)?;
        let phi = time_encode(params, cfg, event.timestamp - self.last_time)?;
        let mut input = Vec::with_capacity(cfg.memory_input());
        input.extend_from_slice(z_v);
        input.extend_from_slice(z_j);
        input.extend_from_slice(&event.features);
        input.extend_from_slice(&phi);
        self.base = Some(current);
        self.input = Some(Tensor::row(input));
        self.last_time = event.timestamp;
        self.spans += 1;
        Ok(())
    }
}

/// Embedding builder bound to one tape and one parameter set. Embeddings
/// are memoized per `(node, time, hop)`, which is sound because every
/// embedding is a pure function of those for a fixed tape.
pub struct Embedder<'g> {
    graph: &'g TemporalGraph,
    cfg: EncoderConfig,
    vars: EncoderVars,
    root: Option<(NodeId, Var)>,
    phi_zero: Option<Var>,
    projected: HashMap<NodeId, Var>,
    cache: HashMap<(NodeId, u64, usize), Var>,
    root_cache: HashMap<u64, Var>,
}

impl<'g> Embedder<'g> {
    pub fn new(tape: &mut Tape, params: &ParamSet, graph: &'g TemporalGraph, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        if graph.d_x() != cfg.d_x || graph.d_e() != cfg.d_e {
            return Err(Error::shape(
                "encoder",
                format!(
                    "graph has d_x={}, d_e={}; config has d_x={}, d_e={}",
                    graph.d_x(),
                    graph.d_e(),
                    cfg.d_x,
                    cfg.d_e
                ),
            ));
        }
        Ok(Self {
            graph,
            cfg: cfg.clone(),
            vars: EncoderVars::register(tape, params, cfg)?,
            root: None,
            phi_zero: None,
            projected: HashMap::new(),
            cache: HashMap::new(),
            root_cache: HashMap::new(),
        })
    }

    pub fn vars(&self) -> &EncoderVars {
        &self.vars
    }

    /// Adds `memory` to the base representation of its node at the top
    /// hop.
    pub fn set_memory(&mut self, tape: &mut Tape, memory: &SpanMemoryState) -> Result<()> {
        self.root_cache.clear();
        self.root = memory.memory_var(tape, &self.vars)?.map(|m| (memory.node, m));
        Ok(())
    }

    /// `W_s x_u`
    fn project(&mut self, tape: &mut Tape, u: NodeId) -> Result<Var> {
        if let Some(&v) = self.projected.get(&u) {
            return Ok(v);
        }
        let x = tape.constant(Tensor::row(self.graph.node_features(u).to_vec()))?;
        let h = tape.matmul(x, self.vars.w_s)?;
        self.projected.insert(u, h);
        Ok(h)
    }

    /// `z_u(t)` at the configured hop depth.
    pub fn embed(&mut self, tape: &mut Tape, u: NodeId, t: f64) -> Result<Var> {
        if u >= self.graph.num_nodes() {
            return Err(Error::UnknownNode(u));
        }
        match self.root {
            Some((root, m)) if root == u => {
                if let Some(&v) = self.root_cache.get(&t.to_bits()) {
                    return Ok(v);
                }
                let x = self.project(tape, u)?;
                let h = tape.add(x, m)?;
                let z = self.attend(tape, u, t, h, self.cfg.hops)?;
                self.root_cache.insert(t.to_bits(), z);
                Ok(z)
            }
            _ => self.embed_hop(tape, u, t, self.cfg.hops),
        }
    }

    fn embed_hop(&mut self, tape: &mut Tape, u: NodeId, t: f64, hop: usize) -> Result<Var> {
        if hop == 0 {
            return self.project(tape, u);
        }
        let key = (u, t.to_bits(), hop);
        if let Some(&v) = self.cache.get(&key) {
            return Ok(v);
        }
        let h = self.project(tape, u)?;
        let z = self.attend(tape, u, t, h, hop)?;
        self.cache.insert(key, z);
        Ok(z)
    }

    /// One attention layer for `u` at `t` with base representation `h_u`;
    /// neighbors enter at depth `hop − 1`.
    fn attend(&mut self, tape: &mut Tape, u: NodeId, t: f64, h_u: Var, hop: usize) -> Result<Var> {
        let graph = self.graph;
        let neighbors = graph.temporal_neighbors(u, t, self.cfg.k)?;
        let vars = self.vars;
        let d = self.cfg.d;
        let h_n = if neighbors.is_empty() {
            tape.constant(Tensor::zeros(&[1, d]))?
        } else {
            let phi0 = match self.phi_zero {
                Some(p) => p,
                None => {
                    let p = time_encode_var(tape, &vars, &[0.0])?;
                    self.phi_zero = Some(p);
                    p
                }
            };
            let q_in = tape.concat(&[h_u, phi0], 1)?;
            let q = tape.matmul(q_in, vars.w_q)?;

            let mut reps = Vec::with_capacity(neighbors.len());
            for n in &neighbors {
                reps.push(self.embed_hop(tape, n.node, n.timestamp, hop - 1)?);
            }
            let h_j = tape.concat(&reps, 0)?;
            let dts: Vec<f64> = neighbors.iter().map(|n| t - n.timestamp).collect();
            let phi = time_encode_var(tape, &vars, &dts)?;
            let x = if self.cfg.d_e > 0 {
                let feats: Vec<Vec<f64>> = neighbors.iter().map(|n| n.features.to_vec()).collect();
                let f = tape.constant(Tensor::from_rows(&feats, self.cfg.d_e)?)?;
                tape.concat(&[h_j, phi, f], 1)?
            } else {
                tape.concat(&[h_j, phi], 1)?
            };
            let keys = tape.matmul(x, vars.w_k)?;
            let values = tape.matmul(x, vars.w_v)?;

            let dk = d / self.cfg.heads;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for head in 0..self.cfg.heads {
                let (lo, hi) = (head * dk, (head + 1) * dk);
                let q_h = tape.slice_cols(q, lo, hi)?;
                let k_h = tape.slice_cols(keys, lo, hi)?;
                let v_h = tape.slice_cols(values, lo, hi)?;
                let k_t = tape.transpose(k_h)?;
                let scores = tape.matmul(q_h, k_t)?;
                let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
                let ws = tape.row_softmax(scores)?;
                heads.push(tape.matmul(ws, v_h)?);
            }
            let agg = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
            let inner = tape.matmul(agg, vars.w_ts2)?;
            let cat = tape.concat(&[inner, q], 1)?;
            tape.matmul(cat, vars.w_ts1)?
        };
        let fused = tape.concat(&[h_n, h_u], 1)?;
        let out = tape.matmul(fused, vars.w_o)?;
        tape.relu(out)
    }
}

/// `z_v(t)` as a plain vector, with optional span memory for its node.
pub fn embed(
    params: &ParamSet,
    graph: &TemporalGraph,
    cfg: &EncoderConfig,
    memory: Option<&SpanMemoryState>,
    v: NodeId,
    t: f64,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut embedder = Embedder::new(&mut tape, params, graph, cfg)?;
    if let Some(m) = memory {
        embedder.set_memory(&mut tape, m)?;
    }
    let z = embedder.embed(&mut tape, v, t)?;
    Ok(tape.value(z).data().to_vec())
}
