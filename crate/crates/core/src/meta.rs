//! Span-level adaptation, loss-weighted parameter fusion and the
//! first-order outer update.
//!
//! Per task: every span adapts a private copy of `θ` by plain SGD on its own
//! loss (encoder keys at `lr1`, predictor keys at `lr2`), while the node's
//! span memory advances span by span. The copies are fused with weights
//! `softmax(−L_r)`, and the query loss at the fused parameters supplies the
//! gradient applied to `θ` directly.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{adam_step, AdamState, ParamSet, Tape, Var};
use crate::encoder::{self, Embedder, EncoderConfig, SpanMemoryState, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::graph::{NodeId, TemporalEvent, TemporalGraph};
use crate::metrics::{self, MetricsReport, Pooling, ScoredPrediction};
use crate::predictor::{self, PredictorConfig, PredictorVars, PREDICTOR_PREFIX, PROB_CLAMP};
use crate::tasks::{partition_spans, NegativeSample, NodeTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Predictor hidden width.
    pub d_h: usize,
}

impl ModelConfig {
    pub fn predictor(&self) -> PredictorConfig {
        PredictorConfig {
            d: self.encoder.d,
            d_h: self.d_h,
            d_x: self.encoder.d_x,
        }
    }
}

pub fn init_model<R: rand::Rng>(model: &ModelConfig, rng: &mut R) -> Result<ParamSet> {
    let mut p = encoder::init_params(&model.encoder, rng)?;
    for (k, v) in predictor::init_params(&model.predictor(), rng)?.iter() {
        p.insert(k, v.clone())?;
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Plain joint training: no span adaptation, no node adaptation, fused
    /// parameters are `θ`.
    pub no_meta: bool,
    /// Span copies stay at `θ`.
    pub no_span_adapt: bool,
    /// No first-layer bias shift.
    pub no_node_adapt: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub lr1: f64,
    pub lr2: f64,
    pub lr3: f64,
    pub inner_steps: usize,
    pub span_size: usize,
    pub n: usize,
    pub m: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub ablation: Ablation,
    pub pooling: Pooling,
    /// Start each training task from the node's memory at the end of its
    /// previous task instead of zero.
    pub persist_memory: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            lr1: 0.0002,
            lr2: 0.025,
            lr3: 0.001,
            inner_steps: 1,
            span_size: 2,
            n: 8,
            m: 8,
            batch_size: 64,
            epochs: 30,
            ablation: Ablation::default(),
            pooling: Pooling::Pooled,
            persist_memory: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr1", self.lr1), ("lr2", self.lr2), ("lr3", self.lr3)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} = {v} must be a finite non-negative rate")));
            }
        }
        if self.n == 0 || self.m == 0 || self.batch_size == 0 {
            return Err(Error::Config("n, m and batch_size must be at least 1".into()));
        }
        if self.span_size == 0 || self.span_size > self.n {
            return Err(Error::Config(format!("span_size {} outside 1..={}", self.span_size, self.n)));
        }
        Ok(())
    }

    fn adapts_spans(&self) -> bool {
        !self.ablation.no_meta && !self.ablation.no_span_adapt && self.inner_steps > 0
    }

    fn adapts_node(&self) -> bool {
        !self.ablation.no_meta && !self.ablation.no_node_adapt
    }
}

/// Shared read-only context of one model on one graph.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub graph: &'a TemporalGraph,
    pub model: &'a ModelConfig,
    pub cfg: &'a MetaConfig,
}

/// Labelled events scored together: positives first, then their paired
/// negatives.
#[derive(Clone, Copy)]
pub struct EventSet<'t> {
    pub positives: &'t [TemporalEvent],
    pub negatives: &'t [NegativeSample],
}

struct SetForward {
    loss: Var,
    probs: Var,
    root: Vec<Var>,
    counterpart: Vec<Var>,
}

/// Summed BCE of `set` for task node `v` under `params`, with optional span
/// memory and node shift.
fn forward_set(
    tape: &mut Tape,
    ctx: Context<'_>,
    params: &ParamSet,
    v: NodeId,
    memory: Option<&SpanMemoryState>,
    node_shift: bool,
    set: EventSet<'_>,
) -> Result<SetForward> {
    if set.positives.is_empty() || set.positives.len() != set.negatives.len() {
        return Err(Error::Empty("event set needs matching positives and negatives"));
    }
    let mut emb = Embedder::new(tape, params, ctx.graph, &ctx.model.encoder)?;
    if let Some(m) = memory {
        emb.set_memory(tape, m)?;
    }
    let shift = node_shift.then(|| ctx.graph.node_features(v));
    let pv = PredictorVars::register(tape, params, shift)?;
    let mut root = Vec::with_capacity(set.positives.len());
    let mut counterpart = Vec::with_capacity(set.positives.len());
    let mut pairs = Vec::with_capacity(2 * set.positives.len());
    for e in set.positives {
        let z_v = emb.embed(tape, v, e.timestamp)?;
        let z_j = emb.embed(tape, e.counterpart(v), e.timestamp)?;
        root.push(z_v);
        counterpart.push(z_j);
        pairs.push((z_v, z_j));
    }
    for (neg, &z_v) in set.negatives.iter().zip(&root) {
        let z_n = emb.embed(tape, neg.dst, neg.timestamp)?;
        pairs.push((z_v, z_n));
    }
    let probs = predictor::probabilities(tape, &pv, &pairs)?;
    let labels: Vec<bool> = (0..pairs.len()).map(|i| i < set.positives.len()).collect();
    let loss = tape.bce(probs, &labels, PROB_CLAMP)?;
    Ok(SetForward {
        loss,
        probs,
        root,
        counterpart,
    })
}

/// Loss of `set` under fixed parameters and memory.
pub fn set_loss(
    ctx: Context<'_>,
    params: &ParamSet,
    v: NodeId,
    memory: Option<&SpanMemoryState>,
    node_shift: bool,
    set: EventSet<'_>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let f = forward_set(&mut tape, ctx, params, v, memory, node_shift, set)?;
    Ok(tape.value(f.loss).item())
}

/// Loss and parameter gradient of `set`.
pub fn set_loss_grad(
    ctx: Context<'_>,
    params: &ParamSet,
    v: NodeId,
    memory: Option<&SpanMemoryState>,
    node_shift: bool,
    set: EventSet<'_>,
) -> Result<(f64, ParamSet)> {
    let mut tape = Tape::new();
    let f = forward_set(&mut tape, ctx, params, v, memory, node_shift, set)?;
    let grads = tape.backward(f.loss)?.to_param_grads(params);
    Ok((tape.value(f.loss).item(), grads))
}

/// One SGD step with `lr1` on encoder keys and `lr2` on predictor keys.
pub fn inner_step(params: &mut ParamSet, grads: &ParamSet, lr1: f64, lr2: f64) -> Result<()> {
    params.check_compatible(grads)?;
    for ((key, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
        let lr = if key.starts_with(ENCODER_PREFIX) {
            lr1
        } else if key.starts_with(PREDICTOR_PREFIX) {
            lr2
        } else {
            return Err(Error::KeyMismatch(key.to_string()));
        };
        p.axpy(-lr, g);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SpanAdapted {
    pub params: ParamSet,
    /// Span memory after this span's update.
    pub memory: SpanMemoryState,
    /// Span loss at `θ` before adaptation.
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptedParams {
    pub node: NodeId,
    pub spans: Vec<SpanAdapted>,
    /// Whether forward passes shift the first-layer bias by `x_v · w_na`.
    pub node_shift: bool,
}

impl AdaptedParams {
    pub fn final_memory(&self) -> &SpanMemoryState {
        &self.spans.last().expect("at least one span").memory
    }

    /// Span parameters with the node shift folded into the bias.
    pub fn materialized(&self, graph: &TemporalGraph, r: usize) -> Result<ParamSet> {
        if self.node_shift {
            predictor::node_adapt(&self.spans[r].params, graph.node_features(self.node))
        } else {
            Ok(self.spans[r].params.clone())
        }
    }
}

/// Adapts a private copy of `θ` to every span of the task's support set, in
/// chronological order. `θ` is only read.
pub fn adapt_task(ctx: Context<'_>, theta: &ParamSet, task: &NodeTask) -> Result<AdaptedParams> {
    adapt_task_from(ctx, theta, task, None)
}

/// [`adapt_task`] starting from `initial` memory instead of zero.
pub fn adapt_task_from(
    ctx: Context<'_>,
    theta: &ParamSet,
    task: &NodeTask,
    initial: Option<&SpanMemoryState>,
) -> Result<AdaptedParams> {
    let cfg = ctx.cfg;
    let partition = partition_spans(task, cfg.span_size)?;
    if partition.spans.is_empty() {
        return Err(Error::Empty("task has no complete span"));
    }
    let v = task.node;
    let mut memory = match initial {
        Some(m) if m.node == v => m.clone(),
        Some(m) => return Err(Error::shape("adapt_task", format!("memory of node {} given for node {v}", m.node))),
        None => SpanMemoryState::new(v),
    };
    let mut spans = Vec::with_capacity(partition.num_spans());
    for (r, span) in partition.spans.iter().enumerate() {
        let set = EventSet {
            positives: span,
            negatives: task.span_negatives(cfg.span_size, r),
        };
        let mem = (!memory.is_empty()).then_some(&memory);

        // forward at θ: span loss, first-step gradient and the embeddings
        // of the span's latest event for the memory update
        let mut tape = Tape::new();
        let f = forward_set(&mut tape, ctx, theta, v, mem, false, set)?;
        let loss = tape.value(f.loss).item();
        let last = span.len() - 1;
        let z_v = tape.value(f.root[last]).data().to_vec();
        let z_j = tape.value(f.counterpart[last]).data().to_vec();

        let mut params = theta.clone();
        if cfg.adapts_spans() {
            let grads = tape.backward(f.loss)?.to_param_grads(theta);
            inner_step(&mut params, &grads, cfg.lr1, cfg.lr2)?;
            for _ in 1..cfg.inner_steps {
                let (_, grads) = set_loss_grad(ctx, &params, v, mem, false, set)?;
                inner_step(&mut params, &grads, cfg.lr1, cfg.lr2)?;
            }
        }
        drop(tape);

        memory.update(&params, &ctx.model.encoder, &span[last], &z_v, &z_j)?;
        spans.push(SpanAdapted {
            params,
            memory: memory.clone(),
            loss,
        });
    }
    Ok(AdaptedParams {
        node: v,
        spans,
        node_shift: cfg.adapts_node(),
    })
}

#[derive(Clone, Debug)]
pub struct FusedParams {
    pub weights: Vec<f64>,
    pub losses: Vec<f64>,
    pub params: ParamSet,
}

/// `softmax(−losses)`
pub fn fusion_weights(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::Empty("fusion needs at least one span"));
    }
    let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let ex: Vec<f64> = losses.iter().map(|l| (lo - l).exp()).collect();
    let total: f64 = ex.iter().sum();
    Ok(ex.into_iter().map(|e| e / total).collect())
}

/// Weights each span copy by `softmax(−L(α_r, β_r, m_r, set))` and returns
/// the convex combination. The node shift, when enabled, stays implicit.
pub fn fuse(ctx: Context<'_>, adapted: &AdaptedParams, set: EventSet<'_>) -> Result<FusedParams> {
    if adapted.spans.len() == 1 {
        let s = &adapted.spans[0];
        let loss = set_loss(ctx, &s.params, adapted.node, Some(&s.memory), adapted.node_shift, set)?;
        return Ok(FusedParams {
            weights: vec![1.0],
            losses: vec![loss],
            params: s.params.clone(),
        });
    }
    let losses = adapted
        .spans
        .iter()
        .map(|s| set_loss(ctx, &s.params, adapted.node, Some(&s.memory), adapted.node_shift, set))
        .collect::<Result<Vec<_>>>()?;
    let weights = fusion_weights(&losses)?;
    let sets: Vec<&ParamSet> = adapted.spans.iter().map(|s| &s.params).collect();
    Ok(FusedParams {
        params: ParamSet::weighted_sum(&sets, &weights)?,
        weights,
        losses,
    })
}

/// Outcome of scoring one task's query set.
#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub loss: f64,
    pub grads: Option<ParamSet>,
    pub predictions: Vec<ScoredPrediction>,
    /// Span memory after the support set.
    pub memory: SpanMemoryState,
}

fn query_set(task: &NodeTask) -> EventSet<'_> {
    EventSet {
        positives: &task.query,
        negatives: &task.query_negatives,
    }
}

fn support_set(task: &NodeTask) -> EventSet<'_> {
    EventSet {
        positives: &task.support,
        negatives: &task.support_negatives,
    }
}

fn outcome(
    ctx: Context<'_>,
    params: &ParamSet,
    task: &NodeTask,
    memory: &SpanMemoryState,
    node_shift: bool,
    with_grads: bool,
) -> Result<TaskOutcome> {
    let set = query_set(task);
    let mut tape = Tape::new();
    let f = forward_set(&mut tape, ctx, params, task.node, Some(memory), node_shift, set)?;
    let loss = tape.value(f.loss).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite("query loss"));
    }
    let n = set.positives.len();
    let predictions = tape
        .value(f.probs)
        .data()
        .iter()
        .enumerate()
        .map(|(i, &probability)| ScoredPrediction {
            probability,
            label: i < n,
            task: task.node,
            event: set.positives[i % n].event_index,
        })
        .collect();
    let grads = if with_grads {
        Some(tape.backward(f.loss)?.to_param_grads(params))
    } else {
        None
    };
    Ok(TaskOutcome {
        loss,
        grads,
        predictions,
        memory: memory.clone(),
    })
}

/// Training-time pass over one task: adapt, fuse on the query set, and take
/// the query-loss gradient at the fused parameters.
pub fn train_task(ctx: Context<'_>, theta: &ParamSet, task: &NodeTask) -> Result<TaskOutcome> {
    train_task_from(ctx, theta, task, None)
}

/// [`train_task`] starting from `initial` memory.
pub fn train_task_from(
    ctx: Context<'_>,
    theta: &ParamSet,
    task: &NodeTask,
    initial: Option<&SpanMemoryState>,
) -> Result<TaskOutcome> {
    let adapted = adapt_task_from(ctx, theta, task, initial)?;
    let memory = adapted.final_memory().clone();
    let fused = if ctx.cfg.ablation.no_meta {
        theta.clone()
    } else {
        fuse(ctx, &adapted, query_set(task))?.params
    };
    outcome(ctx, &fused, task, &memory, adapted.node_shift, true)
}

/// Evaluation pass over one task: adapt on the support set, fuse with
/// support-set losses, score the query set. `θ` is only read.
pub fn test_task(ctx: Context<'_>, theta: &ParamSet, task: &NodeTask) -> Result<TaskOutcome> {
    let adapted = adapt_task(ctx, theta, task)?;
    let memory = adapted.final_memory().clone();
    let fused = if ctx.cfg.ablation.no_meta {
        theta.clone()
    } else {
        fuse(ctx, &adapted, support_set(task))?.params
    };
    outcome(ctx, &fused, task, &memory, adapted.node_shift, false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Query loss per scored pair, averaged over the epoch.
    pub mean_query_loss: f64,
    pub train_auc: f64,
    pub n_tasks: usize,
}

/// Final span memory per node, carried between epochs when
/// `persist_memory` is set.
pub type MemoryBank = BTreeMap<NodeId, SpanMemoryState>;

/// One pass over `tasks` in batches of `batch_size`; each batch sums its
/// task gradients in task order and takes one Adam step at `lr3`. `bank` is
/// read and written only when `persist_memory` is set.
pub fn meta_train_epoch(
    ctx: Context<'_>,
    theta: &mut ParamSet,
    adam: &mut AdamState,
    tasks: &[NodeTask],
    epoch: usize,
    bank: &mut MemoryBank,
) -> Result<EpochStats> {
    if tasks.is_empty() {
        return Err(Error::Empty("no training tasks"));
    }
    let mut total_loss = 0.0;
    let mut scored = 0usize;
    let mut predictions = Vec::new();
    for batch in tasks.chunks(ctx.cfg.batch_size) {
        let snapshot: &ParamSet = theta;
        let persist = ctx.cfg.persist_memory;
        let memories: &MemoryBank = bank;
        let outcomes = batch
            .par_iter()
            .map(|t| train_task_from(ctx, snapshot, t, memories.get(&t.node).filter(|_| persist)))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = theta.zeros_like();
        for o in outcomes {
            if persist {
                bank.insert(o.memory.node, o.memory.clone());
            }
            total_loss += o.loss;
            scored += o.predictions.len();
            grads.add_assign(o.grads.as_ref().expect("training outcome carries gradients"))?;
            predictions.extend(o.predictions);
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite("meta-gradient"));
        }
        adam_step(theta, &grads, adam, ctx.cfg.lr3)?;
    }
    Ok(EpochStats {
        epoch,
        mean_query_loss: total_loss / scored as f64,
        train_auc: metrics::auc(&predictions)?,
        n_tasks: tasks.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub node: NodeId,
    pub n_query: usize,
    pub auc: f64,
}

#[derive(Clone, Debug)]
pub struct MetaTestOutput {
    pub predictions: Vec<ScoredPrediction>,
    pub per_task: Vec<TaskResult>,
    pub report: MetricsReport,
}

pub fn meta_test(ctx: Context<'_>, theta: &ParamSet, tasks: &[NodeTask]) -> Result<MetaTestOutput> {
    if tasks.is_empty() {
        return Err(Error::Empty("no evaluation tasks"));
    }
    let outcomes = tasks
        .par_iter()
        .map(|t| test_task(ctx, theta, t))
        .collect::<Result<Vec<_>>>()?;
    let mut predictions = Vec::new();
    let mut per_task = Vec::with_capacity(tasks.len());
    for (t, o) in tasks.iter().zip(outcomes) {
        per_task.push(TaskResult {
            node: t.node,
            n_query: t.query.len(),
            auc: metrics::auc(&o.predictions)?,
        });
        predictions.extend(o.predictions);
    }
    let report = metrics::evaluate(&predictions, ctx.cfg.pooling)?;
    Ok(MetaTestOutput {
        predictions,
        per_task,
        report,
    })
}
