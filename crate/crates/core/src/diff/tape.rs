//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the record once in reverse order and returns the
//! accumulated adjoints. Parameters enter through [`Tape::param`], which
//! registers the tensor under its [`ParamSet`] key so that gradients can be
//! collected back into a [`ParamSet`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::params::ParamSet;
use super::tensor::{matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    idx: u32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    Concat { inputs: Vec<usize>, axis: usize },
    SliceCols { input: usize, start: usize },
    Transpose(usize),
    RowSoftmax(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Cos(usize),
    Sin(usize),
    LnClamped { input: usize, lo: f64, hi: f64 },
    Sum(usize),
    Interleave(usize, usize),
    Bce { probs: usize, labels: Vec<bool>, lo: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx as usize >= self.nodes.len() {
            return Err(Error::DetachedVar);
        }
        Ok(v.idx as usize)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op });
        Ok(Var { tape: self.id, idx })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let idx = self.idx(v).expect("variable from another tape");
        &self.nodes[idx].value
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Registers (once per tape) the tensor stored under `key` as a
    /// differentiable leaf.
    pub fn param(&mut self, params: &ParamSet, key: &str) -> Result<Var> {
        if let Some(&idx) = self.params.get(key) {
            return Ok(Var {
                tape: self.id,
                idx: idx as u32,
            });
        }
        let value = params.require(key)?.clone();
        let var = self.push(value, Op::Leaf, "param")?;
        self.params.insert(key.to_string(), var.idx as usize);
        Ok(var)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        self.push(out, Op::MatMul(ia, ib), "matmul")
    }

    fn same_shape(&self, op: &'static str, ia: usize, ib: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ia, ib)?;
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x + y);
        self.push(out, Op::Add(ia, ib), "add")
    }

    /// `a[r, c] + b[1, c]` with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let c = va.cols();
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(ia, ib), "add_row")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sub", ia, ib)?;
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x - y);
        self.push(out, Op::Sub(ia, ib), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ia, ib)?;
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x * y);
        self.push(out, Op::Mul(ia, ib), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    /// `factor * a + offset`, elementwise.
    pub fn affine(&mut self, a: Var, factor: f64, offset: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| factor * x + offset);
        self.push(out, Op::Affine(ia, factor), "affine")
    }

    /// Concatenation of 2-D values along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        let inputs = parts
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<Vec<_>>>()?;
        let out = match axis {
            0 => {
                let cols = self.nodes[inputs[0]].value.cols();
                let mut rows = 0;
                let mut data = Vec::new();
                for &i in &inputs {
                    let v = &self.nodes[i].value;
                    if v.cols() != cols {
                        return Err(Error::shape("concat", "column counts differ"));
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Tensor::new(vec![rows, cols], data)?
            }
            1 => {
                let rows = self.nodes[inputs[0]].value.rows();
                let mut cols = 0;
                for &i in &inputs {
                    let v = &self.nodes[i].value;
                    if v.rows() != rows {
                        return Err(Error::shape("concat", "row counts differ"));
                    }
                    cols += v.cols();
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &i in &inputs {
                        let v = &self.nodes[i].value;
                        let c = v.cols();
                        data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
                    }
                }
                Tensor::new(vec![rows, cols], data)?
            }
            _ => return Err(Error::shape("concat", format!("axis {axis}"))),
        };
        self.push(out, Op::Concat { inputs, axis }, "concat")
    }

    /// Columns `start..end` of a 2-D value.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let (r, c) = (v.rows(), v.cols());
        if start > end || end > c {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {c} columns"),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for row in 0..r {
            data.extend_from_slice(&v.data()[row * c + start..row * c + end]);
        }
        let out = Tensor::new(vec![r, w], data)?;
        self.push(out, Op::SliceCols { input: ia, start }, "slice_cols")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.transpose();
        self.push(out, Op::Transpose(ia), "transpose")
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let c = v.cols();
        let mut out = v.clone();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in row.iter_mut() {
                    *x /= total;
                }
            }
        }
        self.push(out, Op::RowSoftmax(ia), "row_softmax")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(sigmoid);
        self.push(out, Op::Sigmoid(ia), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f64::tanh);
        self.push(out, Op::Tanh(ia), "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| x.max(0.0));
        self.push(out, Op::Relu(ia), "relu")
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f64::cos);
        self.push(out, Op::Cos(ia), "cos")
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f64::sin);
        self.push(out, Op::Sin(ia), "sin")
    }

    /// `ln(clamp(a, lo, hi))`; zero gradient where the clamp is active.
    pub fn ln_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| x.clamp(lo, hi).ln());
        self.push(out, Op::LnClamped { input: ia, lo, hi }, "ln_clamped")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        self.push(out, Op::Sum(ia), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Column interleave of two equal-shape values: `[a₀, b₀, a₁, b₁, …]`.
    pub fn interleave_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("interleave_cols", ia, ib)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (r, c) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(2 * r * c);
        for row in 0..r {
            for col in 0..c {
                data.push(va.data()[row * c + col]);
                data.push(vb.data()[row * c + col]);
            }
        }
        let out = Tensor::new(vec![r, 2 * c], data)?;
        self.push(out, Op::Interleave(ia, ib), "interleave_cols")
    }

    /// Summed binary cross-entropy `−Σ ln p(label)` over a column of
    /// probabilities, with `p` clamped to `[lo, 1 − lo]`.
    pub fn bce(&mut self, probs: Var, labels: &[bool], lo: f64) -> Result<Var> {
        let ip = self.idx(probs)?;
        let p = &self.nodes[ip].value;
        if p.is_empty() {
            return Err(Error::Empty("bce"));
        }
        if p.len() != labels.len() {
            return Err(Error::shape(
                "bce",
                format!("{} probabilities, {} labels", p.len(), labels.len()),
            ));
        }
        let hi = 1.0 - lo;
        let loss: f64 = p
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| {
                let x = x.clamp(lo, hi);
                if y {
                    -x.ln()
                } else {
                    -(1.0 - x).ln()
                }
            })
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs: ip,
                labels: labels.to_vec(),
                lo,
            },
            "bce",
        )
    }

    /// Canonical GRU step `h' = (1 − z)⊙n + z⊙h` with sigmoid update and
    /// reset gates and a tanh candidate.
    pub fn gru_cell(&mut self, h: Var, x: Var, p: &GruVars) -> Result<Var> {
        let xz = self.matmul(x, p.w_z)?;
        let hz = self.matmul(h, p.u_z)?;
        let z = self.add(xz, hz)?;
        let z = self.add_row(z, p.b_z)?;
        let z = self.sigmoid(z)?;

        let xr = self.matmul(x, p.w_r)?;
        let hr = self.matmul(h, p.u_r)?;
        let r = self.add(xr, hr)?;
        let r = self.add_row(r, p.b_r)?;
        let r = self.sigmoid(r)?;

        let xn = self.matmul(x, p.w_n)?;
        let xn = self.add_row(xn, p.b_n)?;
        let hn = self.matmul(h, p.u_n)?;
        let rhn = self.mul(r, hn)?;
        let n = self.add(xn, rhn)?;
        let n = self.tanh(n)?;

        let h_minus_n = self.sub(h, n)?;
        let gated = self.mul(z, h_minus_n)?;
        self.add(n, gated)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        let shape = self.nodes[root].value.shape();
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(shape, 1.0));

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params: Vec<(String, usize)> =
            self.params.iter().map(|(k, &v)| (k.clone(), v)).collect();
        params.sort();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                {
                    let ga = slot(grads, *a, va.shape());
                    matmul_nt(g.data(), vb.data(), ga.data_mut(), m, k, n);
                }
                let gb = slot(grads, *b, vb.shape());
                matmul_tn(va.data(), g.data(), gb.data_mut(), m, k, n);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, g);
                let vb = &self.nodes[*b].value;
                let c = vb.cols();
                let gb = slot(grads, *b, vb.shape());
                for row in g.data().chunks(c.max(1)) {
                    for (o, x) in gb.data_mut().iter_mut().zip(row) {
                        *o += x;
                    }
                }
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g);
                let gb = slot(grads, *b, g.shape());
                gb.axpy(-1.0, g);
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(&self.nodes[*b].value, |x, y| x * y);
                let gb = g.zip_map(&self.nodes[*a].value, |x, y| x * y);
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Affine(a, factor) => {
                let ga = slot(grads, *a, g.shape());
                ga.axpy(*factor, g);
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let cols = out.cols();
                    let mut offset = 0;
                    for &input in inputs {
                        let v = &self.nodes[input].value;
                        let n = v.rows() * cols;
                        let gi = slot(grads, input, v.shape());
                        for (o, x) in gi.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *o += x;
                        }
                        offset += n;
                    }
                } else {
                    let (rows, total) = (out.rows(), out.cols());
                    let mut col0 = 0;
                    for &input in inputs {
                        let v = &self.nodes[input].value;
                        let c = v.cols();
                        let gi = slot(grads, input, v.shape());
                        for r in 0..rows {
                            let src = &g.data()[r * total + col0..r * total + col0 + c];
                            for (o, x) in gi.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                        col0 += c;
                    }
                }
            }
            Op::SliceCols { input, start } => {
                let v = &self.nodes[*input].value;
                let (rows, c) = (v.rows(), v.cols());
                let w = out.cols();
                let gi = slot(grads, *input, v.shape());
                for r in 0..rows {
                    let dst = &mut gi.data_mut()[r * c + start..r * c + start + w];
                    for (o, x) in dst.iter_mut().zip(&g.data()[r * w..(r + 1) * w]) {
                        *o += x;
                    }
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, &g.transpose()),
            Op::RowSoftmax(a) => {
                let c = out.cols();
                let mut ga = Tensor::zeros(out.shape());
                if c > 0 {
                    for ((y, dy), dx) in out
                        .data()
                        .chunks(c)
                        .zip(g.data().chunks(c))
                        .zip(ga.data_mut().chunks_mut(c))
                    {
                        let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &dyv) in dx.iter_mut().zip(y).zip(dy) {
                            *d = yv * (dyv - dot);
                        }
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(out, |d, y| d * y * (1.0 - y));
                accumulate(grads, *a, &ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |d, y| d * (1.0 - y * y));
                accumulate(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(&self.nodes[*a].value, |d, x| if x > 0.0 { d } else { 0.0 });
                accumulate(grads, *a, &ga);
            }
            Op::Cos(a) => {
                let ga = g.zip_map(&self.nodes[*a].value, |d, x| -d * x.sin());
                accumulate(grads, *a, &ga);
            }
            Op::Sin(a) => {
                let ga = g.zip_map(&self.nodes[*a].value, |d, x| d * x.cos());
                accumulate(grads, *a, &ga);
            }
            Op::LnClamped { input, lo, hi } => {
                let ga = g.zip_map(&self.nodes[*input].value, |d, x| {
                    if x >= *lo && x <= *hi {
                        d / x
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *input, &ga);
            }
            Op::Sum(a) => {
                let v = &self.nodes[*a].value;
                accumulate(grads, *a, &Tensor::full(v.shape(), g.item()));
            }
            Op::Interleave(a, b) => {
                let v = &self.nodes[*a].value;
                let (r, c) = (v.rows(), v.cols());
                let mut ga = Tensor::zeros(v.shape());
                let mut gb = Tensor::zeros(v.shape());
                for row in 0..r {
                    for col in 0..c {
                        ga.data_mut()[row * c + col] = g.data()[row * 2 * c + 2 * col];
                        gb.data_mut()[row * c + col] = g.data()[row * 2 * c + 2 * col + 1];
                    }
                }
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Bce { probs, labels, lo } => {
                let p = &self.nodes[*probs].value;
                let hi = 1.0 - lo;
                let scale = g.item();
                let data = p
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&x, &y)| {
                        if x < *lo || x > hi {
                            0.0
                        } else if y {
                            -scale / x
                        } else {
                            scale / (1.0 - x)
                        }
                    })
                    .collect();
                let gp = Tensor::new(p.shape().to_vec(), data).expect("same shape");
                accumulate(grads, *probs, &gp);
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], i: usize, shape: &[usize]) -> &'a mut Tensor {
    grads[i].get_or_insert_with(|| Tensor::zeros(shape))
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: &Tensor) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adjoints produced by one [`Tape::backward`] call.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not reach the
    /// loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx as usize).and_then(Option::as_ref)
    }

    /// Gradients keyed like `like`; parameters that were never registered
    /// or do not reach the loss get zeros.
    pub fn to_param_grads(&self, like: &ParamSet) -> ParamSet {
        let mut out = like.zeros_like();
        for (key, idx) in &self.params {
            if let (Some(dst), Some(Some(g))) = (out.get_mut(key), self.grads.get(*idx)) {
                dst.data_mut().copy_from_slice(g.data());
            }
        }
        out
    }
}

/// Tape handles for the nine GRU tensors.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_n: Var,
    pub u_n: Var,
    pub b_n: Var,
}

impl GruVars {
    /// Registers `{prefix}.w_z`, `{prefix}.u_z`, … from `params`.
    pub fn register(tape: &mut Tape, params: &ParamSet, prefix: &str) -> Result<Self> {
        let mut get = |name: &str| tape.param(params, &format!("{prefix}.{name}"));
        Ok(Self {
            w_z: get("w_z")?,
            u_z: get("u_z")?,
            b_z: get("b_z")?,
            w_r: get("w_r")?,
            u_r: get("u_r")?,
            b_r: get("b_r")?,
            w_n: get("w_n")?,
            u_n: get("u_n")?,
            b_n: get("b_n")?,
        })
    }
}
