//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every model in the crate is written against [`Tape`]: the forward pass
//! records nodes, and [`Tape::backward`] walks them in reverse to produce
//! gradients for every [`ParamStore`] tensor plus any external inputs.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rnnt;
use crate::tensor::Matrix;

/// Handle to a named tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    values: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: store
                .values
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in &mut self.values {
            m.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values.iter().map(Matrix::sum_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.values.iter().enumerate().map(|(i, m)| (ParamId(i), m))
    }

    fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        self.values[id.0].add_assign(g);
    }
}

/// Boolean attention pattern: `allowed(r, c)` says whether row `r` may attend to column `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Param(ParamId),
    Input(usize),
    Const,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    JointGrid {
        audio: Var,
        label: Var,
    },
    Transducer {
        logits: Var,
        grad: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Result of a backward pass.
pub struct Backward {
    pub params: Gradients,
    /// Gradient per [`Tape::input`] slot, in registration order.
    pub inputs: Vec<Matrix>,
}

pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    inputs: Vec<Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const LN_EPS: f64 = 1e-5;

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            inputs: Vec::new(),
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    /// An external input whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Matrix) -> Var {
        let slot = self.inputs.len();
        let v = self.push(value, Op::Input(slot));
        self.inputs.push(v);
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        self.push(value, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 × c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(x).cols(), "add_row width");
        let r = r.row(0).to_vec();
        let mut value = self.value(x).clone();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(value, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        self.push(value, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    /// Row-wise layer normalisation with learned gain and bias (`1 × c` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut normed = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gain).row(0);
        let b = self.value(bias).row(0);
        let mut value = normed.clone();
        for r in 0..rows {
            for ((o, gg), bb) in value.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        )
    }

    /// Row-wise softmax; masked-out entries get exactly zero weight.
    pub fn softmax(&mut self, x: Var, mask: Option<&Arc<Mask>>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if let Some(m) = mask {
            assert_eq!(m.shape(), (rows, cols), "mask shape");
        }
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let allowed = |c: usize| mask.map_or(true, |m| m.allowed(r, c));
            let src = xv.row(r);
            let max = (0..cols)
                .filter(|&c| allowed(c))
                .map(|c| src[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let out = value.row_mut(r);
            let mut total = 0.0;
            for c in 0..cols {
                if allowed(c) {
                    out[c] = (src[c] - max).exp();
                    total += out[c];
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        self.push(value, Op::Softmax(x))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = Matrix::zeros(1, xv.cols());
        let n = xv.rows() as f64;
        for r in 0..xv.rows() {
            for (o, v) in value.row_mut(0).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        value.scale_assign(1.0 / n);
        self.push(value, Op::MeanRows(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols height");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let value = Matrix::from_fn(xv.rows(), len, |r, c| xv.get(r, start + c));
        self.push(value, Op::SliceCols { x, start })
    }

    /// Broadcast sum over the transducer grid: row `t·(U+1)+u` is `audio[t] + label[u]`.
    pub fn joint_grid(&mut self, audio: Var, label: Var) -> Var {
        let a = self.value(audio);
        let l = self.value(label);
        assert_eq!(a.cols(), l.cols(), "joint_grid width");
        let (t_len, u_len, cols) = (a.rows(), l.rows(), a.cols());
        let mut value = Matrix::zeros(t_len * u_len, cols);
        for t in 0..t_len {
            for u in 0..u_len {
                let out = value.row_mut(t * u_len + u);
                for ((o, x), y) in out.iter_mut().zip(a.row(t)).zip(l.row(u)) {
                    *o = x + y;
                }
            }
        }
        self.push(value, Op::JointGrid { audio, label })
    }

    /// Transducer negative log-likelihood of `labels` given a `(T·(U+1)) × V` logit grid.
    pub fn transducer_loss(
        &mut self,
        logits: Var,
        frames: usize,
        labels: &[usize],
        blank: usize,
    ) -> Result<Var> {
        let lattice = rnnt::Lattice::new(self.value(logits), frames, labels, blank)?;
        let (loss, grad) = lattice.loss_and_grad();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("transducer loss {loss}")));
        }
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::Transducer { logits, grad },
        ))
    }

    /// Back-propagates from a scalar node with unit seed.
    pub fn backward(&self, loss: Var) -> Backward {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward expects a scalar");
        self.backward_from(&[(loss, Matrix::from_vec(1, 1, vec![1.0]))])
    }

    /// Back-propagates from arbitrary seeds (each seed shaped like its node).
    pub fn backward_from(&self, seeds: &[(Var, Matrix)]) -> Backward {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.clone());
        }
        let mut params = Gradients::zeros_like(self.params);
        let mut inputs: Vec<Matrix> = self
            .inputs
            .iter()
            .map(|&v| {
                let m = self.value(v);
                Matrix::zeros(m.rows(), m.cols())
            })
            .collect();

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param(id) => params.accumulate(*id, &g),
                Op::Input(slot) => inputs[*slot].add_assign(&g),
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_bt(self.value(*b));
                    let db = self.value(*a).matmul_at(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_at(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(x, row) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, g);
                    accumulate(&mut grads, *row, dr);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.map(|v| v * s)),
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let inner = GELU_C * (v + 0.044715 * v * v * v);
                        let t = inner.tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let gv = self.value(*gain).row(0).to_vec();
                    let (rows, cols) = g.shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let nr = normed.row(r);
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for c in 0..cols {
                            let dn = gr[c] * gv[c];
                            mean_dn += dn;
                            mean_dn_n += dn * nr[c];
                            dg.row_mut(0)[c] += gr[c] * nr[c];
                            db.row_mut(0)[c] += gr[c];
                        }
                        mean_dn /= cols as f64;
                        mean_dn_n /= cols as f64;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            let dn = gr[c] * gv[c];
                            out[c] = inv_std[r] * (dn - mean_dn - nr[c] * mean_dn_n);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dg);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yy), &gg) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yy * (gg - inner);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, v) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let n = xv.rows() as f64;
                    let dx = Matrix::from_fn(xv.rows(), xv.cols(), |_, c| g.get(0, c) / n);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut grads, p, Matrix::from_vec(rows, cols, slice));
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let part = Matrix::from_fn(rows, cols, |r, c| g.get(r, offset + c));
                        accumulate(&mut grads, p, part);
                        offset += cols;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::JointGrid { audio, label } => {
                    let (t_len, cols) = self.value(*audio).shape();
                    let u_len = self.value(*label).rows();
                    let mut da = Matrix::zeros(t_len, cols);
                    let mut dl = Matrix::zeros(u_len, cols);
                    for t in 0..t_len {
                        for u in 0..u_len {
                            let gr = g.row(t * u_len + u);
                            for (o, v) in da.row_mut(t).iter_mut().zip(gr) {
                                *o += v;
                            }
                            for (o, v) in dl.row_mut(u).iter_mut().zip(gr) {
                                *o += v;
                            }
                        }
                    }
                    accumulate(&mut grads, *audio, da);
                    accumulate(&mut grads, *label, dl);
                }
                Op::Transducer { logits, grad } => {
                    let s = g.get(0, 0);
                    accumulate(&mut grads, *logits, grad.map(|v| v * s));
                }
            }
        }
        Backward { params, inputs }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
