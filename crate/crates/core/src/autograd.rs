//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough information to push gradients back to its inputs.
//! Trainable tensors live in a [`ParamStore`] and enter a graph through
//! [`Graph::param`], which memoizes so a parameter used many times in one
//! step maps to a single node and its gradient is accumulated once.
//!
//! Everything is 2-D. Vectors are `1 x n` rows, scalars are `1 x 1`.

use std::collections::{BTreeMap, HashMap};

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub type Matrix = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
}

/// Named, ordered collection of trainable matrices.
///
/// Insertion order is the canonical order for checkpoints and optimizer
/// state, so two stores built by the same code line up index for index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is always a
    /// model construction bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    /// `x · w + b` with `b` a `1 x n` row.
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    /// Multiplies every entry by a `1 x 1` node.
    MulScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Tanh(Var),
    /// Per-row standardization followed by `gamma`/`beta`; keeps `1/std`.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Row L2 normalization with an epsilon floor on the norm.
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    /// Sum of every row, giving a `1 x n` row.
    SumRows(Var),
    /// Row-wise sum, giving an `m x 1` column.
    SumCols(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter that took part in the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.grads[node].as_ref().map(|g| (pid, g)))
    }

    /// Dense per-parameter gradients, zero-filled for unused parameters.
    pub fn to_dense(&self, store: &ParamStore) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.raw_dim()))
            .collect();
        for (pid, g) in self.params() {
            out[pid.0] += g;
        }
        out
    }
}

/// The tape.
#[derive(Debug, Default)]
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is wanted (see [`Gradients::get`]).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Matrix::from_elem((1, 1), x))
    }

    /// Brings a parameter into the graph (memoized per graph).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul shape mismatch");
        let out = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.ncols(), "matmul_t shape mismatch");
        let out = va.dot(&vb.t());
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(vx.ncols(), vw.nrows(), "linear input width mismatch");
        assert_eq!(vb.dim(), (1, vw.ncols()), "linear bias shape mismatch");
        let out = vx.dot(vw) + vb;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Linear(x, w, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "add_row shape");
        let out = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "mul_row shape");
        let out = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar expects a 1x1 scale");
        let c = self.scalar(s);
        let out = self.value(a) * c;
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::MulScalar(a, s), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let n = vx.ncols();
        assert_eq!(self.shape(gamma), (1, n), "layer_norm gamma shape");
        assert_eq!(self.shape(beta), (1, n), "layer_norm beta shape");
        let mut out = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n as f64;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let xhat = out;
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row softmax. Entries equal to `-inf` get exactly zero probability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let lse = log_sum_exp(row.iter().copied());
            row.mapv_inplace(|v| v - lse);
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = n.max(eps);
            row.mapv_inplace(|v| v / d);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows { x, norms, eps }, rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, 1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows width mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols height mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Picks rows by index (embedding lookup, masked-position selection).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let out = self.value(table).select(Axis(0), idx);
        let rg = self.rg(table);
        self.push(out, Op::GatherRows(table, idx.to_vec()), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    /// Back-propagates from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params: Vec<(ParamId, usize)> =
            self.params.iter().map(|(&p, &v)| (p, v.0)).collect();
        params.sort();
        Gradients { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::Linear(x, w, b) => {
                if self.rg(*x) {
                    self.accumulate(grads, *x, g.dot(&self.value(*w).t()));
                }
                if self.rg(*w) {
                    self.accumulate(grads, *w, self.value(*x).t().dot(g));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*row));
                }
                if self.rg(*row) {
                    let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::MulScalar(a, s) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.scalar(*s));
                }
                if self.rg(*s) {
                    let d = (g * self.value(*a)).sum();
                    self.accumulate(grads, *s, Matrix::from_elem((1, 1), d));
                }
            }
            Op::Exp(a) => self.accumulate(grads, *a, g * &node.value),
            Op::Log(a) => self.accumulate(grads, *a, g / self.value(*a)),
            Op::Tanh(a) => {
                let d = node.value.mapv(|t| 1.0 - t * t);
                self.accumulate(grads, *a, g * &d);
            }
            Op::Gelu(a) => {
                let d = self.value(*a).mapv(gelu_grad);
                self.accumulate(grads, *a, g * &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let vg = self.value(*gamma);
                if self.rg(*gamma) {
                    let d = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gamma, d);
                }
                if self.rg(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let gh = g * vg;
                    let n = gh.ncols() as f64;
                    let mut dx = Matrix::zeros(gh.raw_dim());
                    for (r, inv) in inv_std.iter().enumerate() {
                        let ghr = gh.row(r);
                        let xr = xhat.row(r);
                        let mean_g = ghr.sum() / n;
                        let mean_gx = ghr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..gh.ncols() {
                            dx[[r, c]] = inv * (ghr[c] - mean_g - xr[c] * mean_gx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = g * y;
                for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&yr, |d, &yv| *d -= yv * dot);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = g.clone();
                for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let total = row.sum();
                    row.zip_mut_with(&yr, |d, &lv| *d -= lv.exp() * total);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let y = &node.value;
                let mut dx = g.clone();
                for ((mut row, yr), &n) in dx.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                    if n > *eps {
                        let dot = row.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>();
                        row.zip_mut_with(&yr, |d, &yv| *d = (*d - yv * dot) / n);
                    } else {
                        row.mapv_inplace(|d| d / eps);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceRows(a, start) => {
                let mut dx = Matrix::zeros(self.value(*a).raw_dim());
                dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *a, dx);
            }
            Op::SliceCols(a, start) => {
                let mut dx = Matrix::zeros(self.value(*a).raw_dim());
                dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.value(p).nrows();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![at..at + rows, ..]).to_owned());
                    }
                    at += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.value(p).ncols();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![.., at..at + cols]).to_owned());
                    }
                    at += cols;
                }
            }
            Op::GatherRows(table, idx) => {
                let mut dx = Matrix::zeros(self.value(*table).raw_dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = dx.row_mut(i);
                    dst += &g.row(r);
                }
                self.accumulate(grads, *table, dx);
            }
            Op::SumAll(a) => {
                let dx = Matrix::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                self.accumulate(grads, *a, dx);
            }
            Op::SumRows(a) => {
                let shape = self.value(*a).raw_dim();
                let dx = g.broadcast(shape).expect("sum_rows broadcast").to_owned();
                self.accumulate(grads, *a, dx);
            }
            Op::SumCols(a) => {
                let shape = self.value(*a).raw_dim();
                let dx = g.broadcast(shape).expect("sum_cols broadcast").to_owned();
                self.accumulate(grads, *a, dx);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable `ln Σ exp(v)`.
pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference gradient of `f` at every entry of `x`.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let orig = xp[[r, c]];
            xp[[r, c]] = orig + h;
            let fp = f(&xp);
            xp[[r, c]] = orig - h;
            let fm = f(&xp);
            xp[[r, c]] = orig;
            out[[r, c]] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn check_unary(x: Matrix, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut store = ParamStore::new();
        let id = store.insert("x", x.clone());
        let mut g = Graph::new();
        let v = g.param(&store, id);
        let y = build(&mut g, v);
        let wm = Matrix::from_shape_fn(g.value(y).raw_dim(), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 1.7);
        let w = g.constant(wm.clone());
        let prod = g.mul(y, w);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let analytic = grads.get(v).unwrap().clone();
        let numeric = numeric_grad(&x, |xx| {
            let mut s = ParamStore::new();
            let id = s.insert("x", xx.clone());
            let mut g = Graph::new();
            let v = g.param(&s, id);
            let y = build(&mut g, v);
            (g.value(y) * &wm).sum()
        });
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample() -> Matrix {
        array![[0.3, -1.2, 0.8, 0.1], [1.5, 0.2, -0.4, -0.9], [-0.6, 0.7, 0.05, 1.1]]
    }

    #[test]
    fn elementwise_grads() {
        check_unary(sample(), |g, v| g.gelu(v));
        check_unary(sample(), |g, v| g.tanh(v));
        check_unary(sample(), |g, v| g.exp(v));
        check_unary(sample().mapv(|x| x.abs() + 0.5), |g, v| g.log(v));
        check_unary(sample(), |g, v| g.scale(v, -2.5));
    }

    #[test]
    fn row_reduction_grads() {
        check_unary(sample(), |g, v| g.softmax_rows(v));
        check_unary(sample(), |g, v| g.log_softmax_rows(v));
        check_unary(sample(), |g, v| g.l2_normalize_rows(v, 1e-12));
        check_unary(sample(), |g, v| g.sum_rows(v));
        check_unary(sample(), |g, v| g.sum_cols(v));
        check_unary(sample(), |g, v| {
            let gamma = g.constant(array![[1.0, 0.5, -2.0, 1.5]]);
            let beta = g.constant(array![[0.1, 0.0, 0.2, -0.3]]);
            g.layer_norm(v, gamma, beta, 1e-5)
        });
    }

    #[test]
    fn structural_grads() {
        check_unary(sample(), |g, v| g.transpose(v));
        check_unary(sample(), |g, v| g.slice_cols(v, 1, 2));
        check_unary(sample(), |g, v| g.slice_rows(v, 1, 2));
        check_unary(sample(), |g, v| g.gather_rows(v, &[2, 0, 2]));
        check_unary(sample(), |g, v| {
            let a = g.slice_cols(v, 0, 2);
            let b = g.slice_cols(v, 2, 2);
            g.concat_cols(&[b, a, b])
        });
        check_unary(sample(), |g, v| {
            let a = g.row(v, 0);
            g.concat_rows(&[v, a])
        });
    }

    #[test]
    fn binary_grads() {
        let w = array![[0.2, -0.1], [0.4, 0.3], [-0.5, 0.8], [0.05, -0.6]];
        check_unary(sample(), |g, v| {
            let w = g.constant(w.clone());
            g.matmul(v, w)
        });
        check_unary(sample(), |g, v| g.matmul_t(v, v));
        check_unary(sample(), |g, v| {
            let r = g.slice_rows(v, 0, 1);
            let m = g.mul_row(v, r);
            g.add_row(m, r)
        });
        check_unary(sample(), |g, v| {
            let s = g.slice_rows(v, 0, 1);
            let s = g.slice_cols(s, 0, 1);
            g.mul_scalar(v, s)
        });
        check_unary(w.clone(), |g, v| {
            let x = g.constant(sample());
            let b = g.constant(array![[0.3, -0.2]]);
            g.linear(x, v, b)
        });
        check_unary(array![[0.3, -0.2]], |g, b| {
            let x = g.constant(sample());
            let w = g.constant(w.clone());
            g.linear(x, w, b)
        });
        check_unary(sample(), |g, v| {
            let t = g.transpose(v);
            let p = g.matmul(v, t);
            let q = g.sub(p, p);
            let r = g.mul(p, p);
            g.add(q, r)
        });
    }

    #[test]
    fn masked_softmax_assigns_exact_zero() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, f64::NEG_INFINITY, 0.5]]);
        let y = g.softmax_rows(x);
        assert_eq!(g.value(y)[[0, 1]], 0.0);
        assert!((g.value(y).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shared_param_accumulates_once() {
        let mut store = ParamStore::new();
        let id = store.insert("w", array![[2.0]]);
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let p = g.mul(a, b);
        let grads = g.backward(p);
        let dense = grads.to_dense(&store);
        assert_eq!(dense[0][[0, 0]], 4.0);
    }
}
