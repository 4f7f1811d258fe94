//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value in a [`Graph`] is a 2-D row-major matrix; vectors are `1 × d`
//! rows and scalars are `1 × 1`. Nodes are appended in evaluation order, so a
//! single reverse sweep over the tape is a valid topological order for the
//! backward pass. Parameters enter the tape through [`Graph::param`], which
//! remembers the [`ParamId`] so gradients can be routed back to the store.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    NormalizeRows(Var),
    LayerNorm(Var, f64),
    Conv3x3 { input: Var, weight: Var, grid: usize },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// A computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires(v));
        self.push(value, op, requires_grad)
    }

    /// Differentiable leaf (used for gradient checks w.r.t. raw inputs).
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Copy of `v`'s value with no path back to its producers.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Leaf bound to a stored parameter. Repeated calls within one graph
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push_op(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push_op(value, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push_op(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push_op(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push_op(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push_op(value, Op::Mul(a, b), &[a, b])
    }

    /// `a + row` with `row` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push_op(value, Op::AddRow(a, row), &[a, row])
    }

    /// `a ⊙ row` with `row` broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        self.push_op(value, Op::MulRow(a, row), &[a, row])
    }

    /// `a ⊙ col` with the `n × 1` column broadcast over every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) * self.value(col);
        self.push_op(value, Op::MulCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push_op(value, Op::Scale(a, c), &[a])
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push_op(value, Op::Shift(a), &[a])
    }

    /// `c − a`
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.shift(neg, c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push_op(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push_op(value, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push_op(value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push_op(value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push_op(value, Op::Log(a), &[a])
    }

    /// Elementwise clamp; the gradient passes only where `lo ≤ x ≤ hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push_op(value, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push_op(value, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push_op(value, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push_op(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push_op(value, Op::Mean(a), &[a])
    }

    /// Sum of scalars; `0` for an empty slice.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.scalar_constant(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts differ");
        self.push_op(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts differ");
        self.push_op(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push_op(value, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push_op(value, Op::SliceCols(a, start), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.push_op(value, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    /// Picks individual entries into an `n × 1` column.
    pub fn gather_elems(&mut self, a: Var, at: &[(usize, usize)]) -> Var {
        let src = self.value(a);
        let value = Array2::from_shape_fn((at.len(), 1), |(k, _)| src[at[k]]);
        self.push_op(value, Op::GatherElems(a, at.to_vec()), &[a])
    }

    /// Scales each row to unit Euclidean norm. Callers must rule out zero rows.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row /= norm;
        }
        self.push_op(value, Op::NormalizeRows(a), &[a])
    }

    /// Per-row standardisation without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            row -= mean;
            let var = row.dot(&row) / n;
            row /= (var + eps).sqrt();
        }
        self.push_op(value, Op::LayerNorm(a, eps), &[a])
    }

    /// 3×3 "same" convolution over a `grid × grid` map stored as
    /// `(grid·grid) × c_in` rows (row index `i·grid + j`). `weight` is
    /// `(9·c_in) × c_out`, taps ordered `(di, dj)` row-major over `-1..=1`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, grid: usize) -> Var {
        let cols = im2col(self.value(input), grid);
        let value = cols.dot(self.value(weight));
        self.push_op(value, Op::Conv3x3 { input, weight, grid }, &[input, weight])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.requires(*a) {
                        self.acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.requires(*b) {
                        self.acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.requires(*a) {
                        self.acc(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if self.requires(*b) {
                        self.acc(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Transpose(a) => self.acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *b, -&g);
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.requires(*a) {
                        self.acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.requires(*b) {
                        self.acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.requires(*row) {
                        self.acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    if self.requires(*row) {
                        let d = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *row, d);
                    }
                    if self.requires(*a) {
                        self.acc(&mut grads, *a, &g * self.value(*row));
                    }
                }
                Op::MulCol(a, col) => {
                    if self.requires(*col) {
                        let d = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        self.acc(&mut grads, *col, d);
                    }
                    if self.requires(*a) {
                        self.acc(&mut grads, *a, &g * self.value(*col));
                    }
                }
                Op::Scale(a, c) => self.acc(&mut grads, *a, g * *c),
                Op::Shift(a) => self.acc(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let d = Zip::from(&g).and(out).map_collect(|&g, &y| g * y * (1.0 - y));
                    self.acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = Zip::from(&g).and(out).map_collect(|&g, &y| g * (1.0 - y * y));
                    self.acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    self.acc(&mut grads, *a, d);
                }
                Op::Exp(a) => self.acc(&mut grads, *a, g * out),
                Op::Log(a) => {
                    let d = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| g / x);
                    self.acc(&mut grads, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let d = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| {
                        if x >= *lo && x <= *hi {
                            g
                        } else {
                            0.0
                        }
                    });
                    self.acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let mut d = &g * out;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                        let dot = drow.sum();
                        drow.zip_mut_with(&yrow, |dv, &y| *dv -= y * dot);
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut d = g.clone();
                    for ((mut drow, grow), yrow) in d.rows_mut().into_iter().zip(g.rows()).zip(out.rows()) {
                        let total = grow.sum();
                        drow.zip_mut_with(&yrow, |dv, &y| *dv -= y.exp() * total);
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let shape = self.shape(*a);
                    self.acc(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let shape = self.shape(*a);
                    let n = (shape.0 * shape.1) as f64;
                    self.acc(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]] / n));
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        if self.requires(p) {
                            self.acc(&mut grads, p, g.slice(s![start..start + rows, ..]).to_owned());
                        }
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.shape(p).1;
                        if self.requires(p) {
                            self.acc(&mut grads, p, g.slice(s![.., start..start + cols]).to_owned());
                        }
                        start += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    self.acc(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    self.acc(&mut grads, *a, d);
                }
                Op::GatherRows(a, rows) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(r);
                        dst += &g.row(k);
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::GatherElems(a, at) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    for (k, &ij) in at.iter().enumerate() {
                        d[ij] += g[[k, 0]];
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(*a);
                    let mut d = g.clone();
                    for ((mut drow, xrow), yrow) in d.rows_mut().into_iter().zip(x.rows()).zip(out.rows()) {
                        let norm = xrow.dot(&xrow).sqrt();
                        let gy = drow.dot(&yrow);
                        drow.zip_mut_with(&yrow, |dv, &y| *dv = (*dv - y * gy) / norm);
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::LayerNorm(a, eps) => {
                    let x = self.value(*a);
                    let mut d = g.clone();
                    for ((mut drow, xrow), yrow) in d.rows_mut().into_iter().zip(x.rows()).zip(out.rows()) {
                        let n = xrow.len() as f64;
                        let mean = xrow.sum() / n;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let g_mean = drow.sum() / n;
                        let gy_mean = drow.dot(&yrow) / n;
                        drow.zip_mut_with(&yrow, |dv, &y| *dv = inv_std * (*dv - g_mean - y * gy_mean));
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::Conv3x3 { input, weight, grid } => {
                    let x = self.value(*input);
                    if self.requires(*weight) {
                        let cols = im2col(x, *grid);
                        self.acc(&mut grads, *weight, cols.t().dot(&g));
                    }
                    if self.requires(*input) {
                        let gcols = g.dot(&self.value(*weight).t());
                        self.acc(&mut grads, *input, col2im(&gcols, *grid, x.ncols()));
                    }
                }
            }
        }

        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf, if the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. a leaf, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Array2<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(graph.shape(v)))
    }

    /// Parameter gradients for every parameter that entered the tape.
    pub fn param_grads(&self) -> Vec<(ParamId, &Array2<f64>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
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

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn im2col(x: &Array2<f64>, grid: usize) -> Array2<f64> {
    let c = x.ncols();
    let mut cols = Array2::zeros((grid * grid, 9 * c));
    let g = grid as isize;
    for i in 0..g {
        for j in 0..g {
            let r = (i * g + j) as usize;
            for (t, (di, dj)) in TAPS.iter().enumerate() {
                let (ni, nj) = (i + di, j + dj);
                if ni < 0 || nj < 0 || ni >= g || nj >= g {
                    continue;
                }
                let src = (ni * g + nj) as usize;
                cols.slice_mut(s![r, t * c..(t + 1) * c]).assign(&x.row(src));
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, grid: usize, c: usize) -> Array2<f64> {
    let mut x = Array2::zeros((grid * grid, c));
    let g = grid as isize;
    for i in 0..g {
        for j in 0..g {
            let r = (i * g + j) as usize;
            for (t, (di, dj)) in TAPS.iter().enumerate() {
                let (ni, nj) = (i + di, j + dj);
                if ni < 0 || nj < 0 || ni >= g || nj >= g {
                    continue;
                }
                let src = (ni * g + nj) as usize;
                let mut dst = x.row_mut(src);
                dst += &cols.slice(s![r, t * c..(t + 1) * c]);
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` at `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = x.clone();
            plus[[r, c]] += h;
            let mut minus = x.clone();
            minus[[r, c]] -= h;
            out[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn check_unary(x: Array2<f64>, build: impl Fn(&mut Graph, Var) -> Var) {
        let eval = |x: &Array2<f64>| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let y = build(&mut g, v);
            let s = g.sum(y);
            g.scalar(s)
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let y = build(&mut g, v);
        let s = g.sum(y);
        let analytic = g.backward(s).get_or_zeros(&g, v);
        let numeric = numeric_grad(&x, eval);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() <= 1e-6 + 1e-5 * n.abs(), "analytic {a} vs numeric {n}");
        }
    }

    fn probe() -> Array2<f64> {
        array![[0.3, -1.2, 0.7, 2.1], [-0.4, 0.9, -0.05, 0.6], [1.3, 0.2, -0.8, -1.7]]
    }

    #[test]
    fn elementwise_grads() {
        check_unary(probe(), |g, v| g.sigmoid(v));
        check_unary(probe(), |g, v| g.tanh(v));
        check_unary(probe(), |g, v| g.relu(v));
        check_unary(probe(), |g, v| g.exp(v));
        check_unary(probe().mapv(f64::abs), |g, v| g.log(v));
        check_unary(probe(), |g, v| g.clamp(v, -0.5, 1.0));
        check_unary(probe(), |g, v| {
            let w = g.mul(v, v);
            g.scale(w, 0.5)
        });
    }

    #[test]
    fn row_reductions_grads() {
        let weights = array![[0.3, -1.0, 2.0, 0.5], [1.0, 0.2, -0.3, 0.8], [0.1, 0.4, 0.9, -2.0]];
        for build in [
            (|g: &mut Graph, v| g.softmax_rows(v)) as fn(&mut Graph, Var) -> Var,
            |g, v| g.log_softmax_rows(v),
            |g, v| g.normalize_rows(v),
            |g, v| g.layer_norm(v, 1e-5),
        ] {
            let w = weights.clone();
            check_unary(probe(), move |g, v| {
                let y = build(g, v);
                let c = g.constant(w.clone());
                g.mul(y, c)
            });
        }
    }

    #[test]
    fn structural_grads() {
        let other = array![[0.5, -0.3], [1.1, 0.2], [-0.7, 0.4], [0.3, 0.9]];
        check_unary(probe(), move |g, v| {
            let b = g.constant(other.clone());
            let y = g.matmul(v, b);
            g.mul(y, y)
        });
        check_unary(probe(), |g, v| {
            let t = g.transpose(v);
            let y = g.matmul_nt(v, v);
            let z = g.matmul(v, t);
            let w = g.mul(y, z);
            g.sigmoid(w)
        });
        check_unary(probe(), |g, v| {
            let a = g.slice_rows(v, 1, 2);
            let b = g.slice_cols(v, 1, 3);
            let c = g.gather_rows(v, &[2, 0, 2]);
            let e = g.gather_elems(v, &[(0, 1), (2, 3), (0, 1)]);
            let rows = g.concat_rows(&[a, c]);
            let s1 = g.sum(rows);
            let tb = g.tanh(b);
            let s2 = g.mean(tb);
            let se = g.sum(e);
            let sq = g.mul(se, se);
            g.add_all(&[s1, s2, sq])
        });
        check_unary(probe(), |g, v| {
            let row = g.slice_rows(v, 0, 1);
            let col = g.slice_cols(v, 2, 1);
            let a = g.mul_row(v, row);
            let b = g.add_row(a, row);
            let c = g.mul_col(b, col);
            let cc = g.concat_cols(&[c, col]);
            g.tanh(cc)
        });
    }

    #[test]
    fn conv_grads_match_finite_differences() {
        let grid = 3;
        let input = Array2::from_shape_fn((grid * grid, 2), |(r, c)| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6);
        let weight = Array2::from_shape_fn((18, 3), |(r, c)| ((r * 5 + c * 11) % 7) as f64 * 0.1 - 0.3);
        let w = weight.clone();
        check_unary(input.clone(), move |g, v| {
            let wv = g.constant(w.clone());
            let y = g.conv3x3(v, wv, grid);
            g.tanh(y)
        });
        check_unary(weight, move |g, v| {
            let x = g.constant(input.clone());
            let y = g.conv3x3(x, v, grid);
            g.tanh(y)
        });
    }

    #[test]
    fn conv_identity_tap_copies_input() {
        let grid = 4;
        let x = Array2::from_shape_fn((16, 2), |(r, c)| (r * 2 + c) as f64);
        let mut w = Array2::zeros((18, 2));
        w[[8, 0]] = 1.0;
        w[[9, 1]] = 1.0;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w);
        let y = g.conv3x3(xv, wv, grid);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input(array![[2.0]]);
        let d = g.detach(x);
        let y = g.mul(x, d);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 2.0);
    }
}
