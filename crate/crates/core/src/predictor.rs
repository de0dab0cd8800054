//! Two-layer MLP link scorer `sigmoid(w2 · relu(w1 · [z_v ‖ z_j] + b1) + b2)`
//! and the node-adaptation shift of its first-layer bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const PREDICTOR_PREFIX: &str = "predictor.";
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Embedding width.
    pub d: usize,
    /// Hidden width.
    pub d_h: usize,
    /// Node-feature width for the adaptation projection.
    pub d_x: usize,
}

pub fn init_params<R: Rng>(cfg: &PredictorConfig, rng: &mut R) -> Result<ParamSet> {
    if cfg.d == 0 || cfg.d_h == 0 || cfg.d_x == 0 {
        return Err(Error::Config("predictor widths must be positive".into()));
    }
    let mut p = ParamSet::new();
    p.insert("predictor.w1", ParamSet::uniform_weight(rng, 2 * cfg.d, cfg.d_h))?;
    p.insert("predictor.b1", Tensor::zeros(&[1, cfg.d_h]))?;
    p.insert("predictor.w2", ParamSet::uniform_weight(rng, cfg.d_h, 1))?;
    p.insert("predictor.b2", Tensor::zeros(&[1, 1]))?;
    p.insert("predictor.w_na", ParamSet::uniform_weight(rng, cfg.d_x, cfg.d_h))?;
    Ok(p)
}

/// Tape handles for one scoring pass. `b1` already carries the node shift
/// when one was requested.
#[derive(Clone, Copy, Debug)]
pub struct PredictorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl PredictorVars {
    /// With `node_features = Some(x_v)` the first-layer bias becomes
    /// `b1 + x_v · w_na`, differentiable in both terms.
    pub fn register(tape: &mut Tape, params: &ParamSet, node_features: Option<&[f64]>) -> Result<Self> {
        let w1 = tape.param(params, "predictor.w1")?;
        let mut b1 = tape.param(params, "predictor.b1")?;
        if let Some(x) = node_features {
            let w_na = tape.param(params, "predictor.w_na")?;
            let x = tape.constant(Tensor::row(x.to_vec()))?;
            let shift = tape.matmul(x, w_na)?;
            b1 = tape.add(b1, shift)?;
        }
        Ok(Self {
            w1,
            b1,
            w2: tape.param(params, "predictor.w2")?,
            b2: tape.param(params, "predictor.b2")?,
        })
    }
}

/// Pre-sigmoid scores, one row per `(z_v, z_j)` pair, as an `[n, 1]` column.
pub fn logits(tape: &mut Tape, vars: &PredictorVars, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Empty("predict"));
    }
    let rows = pairs
        .iter()
        .map(|&(a, b)| tape.concat(&[a, b], 1))
        .collect::<Result<Vec<_>>>()?;
    let x = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
    let h = tape.matmul(x, vars.w1)?;
    let h = tape.add_row(h, vars.b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, vars.w2)?;
    tape.add_row(o, vars.b2)
}

pub fn probabilities(tape: &mut Tape, vars: &PredictorVars, pairs: &[(Var, Var)]) -> Result<Var> {
    let l = logits(tape, vars, pairs)?;
    tape.sigmoid(l)
}

/// Edge probability for plain embedding vectors.
pub fn predict(params: &ParamSet, z_v: &[f64], z_j: &[f64]) -> Result<f64> {
    if z_v.iter().chain(z_j).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("predict input"));
    }
    let d = params.require("predictor.w1")?.rows() / 2;
    if z_v.len() != d || z_j.len() != d {
        return Err(Error::shape("predict", format!("embeddings of width {} and {}, expected {d}", z_v.len(), z_j.len())));
    }
    let mut tape = Tape::new();
    let vars = PredictorVars::register(&mut tape, params, None)?;
    let a = tape.constant(Tensor::row(z_v.to_vec()))?;
    let b = tape.constant(Tensor::row(z_j.to_vec()))?;
    let p = probabilities(&mut tape, &vars, &[(a, b)])?;
    Ok(tape.value(p).item())
}

/// `−Σ_pos ln p − Σ_neg ln(1 − p)` with `p` clamped to
/// `[PROB_CLAMP, 1 − PROB_CLAMP]`.
pub fn bce_loss(probs: &[f64], labels: &[bool]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Empty("bce_loss"));
    }
    if probs.len() != labels.len() {
        return Err(Error::shape("bce_loss", format!("{} probabilities, {} labels", probs.len(), labels.len())));
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::column(probs.to_vec()))?;
    let l = tape.bce(p, labels, PROB_CLAMP)?;
    Ok(tape.value(l).item())
}

/// `β` with the first-layer bias shifted by `x_v · w_na`.
pub fn node_adapt(params: &ParamSet, x_v: &[f64]) -> Result<ParamSet> {
    let w_na = params.require("predictor.w_na")?;
    if w_na.rows() != x_v.len() {
        return Err(Error::shape("node_adapt", format!("x_v has {} entries, w_na has {} rows", x_v.len(), w_na.rows())));
    }
    let shift = Tensor::row(x_v.to_vec()).matmul(w_na)?;
    let mut out = params.clone();
    out.get_mut("predictor.b1")
        .ok_or_else(|| Error::KeyMismatch("predictor.b1".into()))?
        .add_assign(&shift);
    Ok(out)
}
