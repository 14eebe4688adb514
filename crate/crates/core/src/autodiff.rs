//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward
//! evaluation. Every operation appends a node holding its value; calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! one gradient per parameter.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{masked_softmax, Matrix, Scalar};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// The instance (box-token) encoder.
    Backbone,
    Rest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix<T>,
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix<T>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, group, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.id(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        let id = self.id(name)?;
        Some(&mut self.entries[id].value)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn value(&self, id: usize) -> &Matrix<T> {
        &self.entries[id].value
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.data().len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// One gradient slot per parameter, `None` when the parameter was unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub slots: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        Self {
            slots: vec![None; params.len()],
        }
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(g) = theirs {
                match mine {
                    Some(m) => m.add_assign(g),
                    None => *mine = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.slots.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn get(&self, id: usize) -> Option<&Matrix<T>> {
        self.slots[id].as_ref()
    }

    pub fn is_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|g| g.data().iter().all(|v| v.is_finite()))
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Matrix<T>),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix<T>,
        count: usize,
    },
    Sum(Vec<Var>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            dropout: None,
        }
    }

    /// Enables inverted dropout with the given rate for [`Graph::dropout`] calls.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    /// Identity unless dropout was enabled on this graph.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let rate = *rate;
        let (r, c) = self.nodes[x.0].value.shape();
        let keep = T::lit(1.0 / (1.0 - rate));
        let factor = (0..r * c)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        self.mul_const(x, Matrix::from_vec(r, c, factor))
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Node for the named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(self.params.value(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds the `1 x c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let r = r.row(0).to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (v, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *v = *v + b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// Elementwise product with a constant (used for dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Matrix<T>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), factor.shape(), "mul_const shape mismatch");
        let data = x.data().iter().zip(factor.data()).map(|(&p, &q)| p * q).collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data);
        self.push(value, Op::MulConst(a, factor))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| gelu(x).0);
        self.push(value, Op::Gelu(a))
    }

    /// Per-row layer normalization with affine `gamma`/`beta` (both `1 x c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let eps = T::lit(LAYER_NORM_EPS);
        let cf = T::from_usize(c).unwrap();
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat.set(r, j, h);
                out.set(r, j, g[j] * h + b[j]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax restricted to `allowed` (row-major, same shape as `x`).
    /// Rows with no allowed entry come out as zeros.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        assert_eq!(allowed.len(), n * c, "mask shape mismatch");
        let mut out = Matrix::zeros(n, c);
        for r in 0..n {
            let p = masked_softmax(xv.row(r), |j| allowed[r * c + j]);
            out.row_mut(r).copy_from_slice(&p);
        }
        self.push(out, Op::Softmax(x))
    }

    /// Rows of `table` at `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let cols = v.cols();
        let data = v.data()[start * cols..(start + len) * cols].to_vec();
        self.push(Matrix::from_vec(len, cols, data), Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let mut out = Matrix::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// `1 x c` mean of the listed rows.
    pub fn mean_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        assert!(!rows.is_empty(), "mean over no rows");
        let v = self.value(a);
        let mut out = vec![T::zero(); v.cols()];
        for &r in rows {
            for (o, &x) in out.iter_mut().zip(v.row(r)) {
                *o = *o + x;
            }
        }
        let n = T::from_usize(rows.len()).unwrap();
        for o in &mut out {
            *o = *o / n;
        }
        self.push(Matrix::row_vector(out), Op::MeanRows(a, rows.to_vec()))
    }

    /// Mean over rows with a target of `-log softmax(logits)[target]`, the
    /// softmax taken over `allowed_cols` (all columns when `None`).
    /// Evaluates to 0 when no row has a target.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        allowed_cols: Option<&[bool]>,
    ) -> Var {
        let lv = self.value(logits);
        let (n, c) = lv.shape();
        assert_eq!(targets.len(), n, "one target slot per row");
        let mut probs = Matrix::zeros(n, c);
        let mut total = T::zero();
        let mut count = 0;
        for r in 0..n {
            let Some(t) = targets[r] else { continue };
            let row = lv.row(r);
            let ok = |j: usize| allowed_cols.is_none_or(|m| m[j]);
            assert!(ok(t), "target column is masked out");
            let max = (0..c)
                .filter(|&j| ok(j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in (0..c).filter(|&j| ok(j)) {
                sum = sum + (row[j] - max).exp();
            }
            let lse = max + sum.ln();
            total = total + (lse - row[t]);
            for j in (0..c).filter(|&j| ok(j)) {
                probs.set(r, j, (row[j] - lse).exp());
            }
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Sum of `1 x 1` scalars.
    pub fn sum(&mut self, terms: &[Var]) -> Var {
        let mut acc = T::zero();
        for &t in terms {
            acc = acc + self.value(t).get(0, 0);
        }
        self.push(Matrix::filled(1, 1, acc), Op::Sum(terms.to_vec()))
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.get(0, 0)
    }

    /// Gradients of the scalar node `output` with respect to every parameter.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.value(output).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));
        let mut result = Gradients::zeros_like(self.params);

        for idx in (0..=output.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, g: Matrix<T>| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    result.slots[*id] = Some(gy);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    send(*a, gy.matmul_nt(bv));
                    send(*b, av.matmul_tn(&gy));
                }
                Op::MatMulNT(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    send(*a, gy.matmul(bv));
                    send(*b, gy.matmul_tn(av));
                }
                Op::Add(a, b) => {
                    send(*a, gy.clone());
                    send(*b, gy);
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![T::zero(); gy.cols()];
                    for r in 0..gy.rows() {
                        for (acc, &g) in gr.iter_mut().zip(gy.row(r)) {
                            *acc = *acc + g;
                        }
                    }
                    send(*a, gy);
                    send(*row, Matrix::row_vector(gr));
                }
                Op::MulConst(a, factor) => {
                    let data = gy.data().iter().zip(factor.data()).map(|(&g, &f)| g * f).collect();
                    send(*a, Matrix::from_vec(gy.rows(), gy.cols(), data));
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    send(*a, gy.map(|g| g * s));
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[a.0].value;
                    let data = gy.data().iter().zip(x.data()).map(|(&g, &xv)| g * gelu(xv).1).collect();
                    send(*a, Matrix::from_vec(gy.rows(), gy.cols(), data));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, c) = gy.shape();
                    let g = self.nodes[gamma.0].value.row(0);
                    let cf = T::from_usize(c).unwrap();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    let mut dx = Matrix::zeros(n, c);
                    for r in 0..n {
                        let dy = gy.row(r);
                        let h = xhat.row(r);
                        let mut dh = vec![T::zero(); c];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..c {
                            dgamma[j] = dgamma[j] + dy[j] * h[j];
                            dbeta[j] = dbeta[j] + dy[j];
                            dh[j] = dy[j] * g[j];
                            sum_dh = sum_dh + dh[j];
                            sum_dh_h = sum_dh_h + dh[j] * h[j];
                        }
                        let k = inv_std[r] / cf;
                        for j in 0..c {
                            dx.set(r, j, k * (cf * dh[j] - sum_dh - h[j] * sum_dh_h));
                        }
                    }
                    send(*x, dx);
                    send(*gamma, Matrix::row_vector(dgamma));
                    send(*beta, Matrix::row_vector(dbeta));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let (n, c) = y.shape();
                    let mut dx = Matrix::zeros(n, c);
                    for r in 0..n {
                        let yr = y.row(r);
                        let gr = gy.row(r);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            dx.set(r, j, yr[j] * (gr[j] - dot));
                        }
                    }
                    send(*a, dx);
                }
                Op::Gather(table, ids) => {
                    let tv = &self.nodes[table.0].value;
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (acc, &g) in dt.row_mut(id).iter_mut().zip(gy.row(r)) {
                            *acc = *acc + g;
                        }
                    }
                    send(*table, dt);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.rows();
                        let cols = gy.cols();
                        let data = gy.data()[start * cols..(start + rows) * cols].to_vec();
                        send(*p, Matrix::from_vec(rows, cols, data));
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    let cols = src.cols();
                    da.data_mut()[start * cols..(start + gy.rows()) * cols].copy_from_slice(gy.data());
                    send(*a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.nodes[p.0].value.cols();
                        let mut dp = Matrix::zeros(gy.rows(), cols);
                        for r in 0..gy.rows() {
                            dp.row_mut(r).copy_from_slice(&gy.row(r)[offset..offset + cols]);
                        }
                        send(*p, dp);
                        offset += cols;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..gy.rows() {
                        da.row_mut(r)[*start..*start + gy.cols()].copy_from_slice(gy.row(r));
                    }
                    send(*a, da);
                }
                Op::MeanRows(a, rows) => {
                    let src = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    let n = T::from_usize(rows.len()).unwrap();
                    for &r in rows {
                        for (acc, &g) in da.row_mut(r).iter_mut().zip(gy.row(0)) {
                            *acc = *acc + g / n;
                        }
                    }
                    send(*a, da);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let (n, c) = probs.shape();
                    let mut dl = Matrix::zeros(n, c);
                    if *count > 0 {
                        let w = gy.get(0, 0) / T::from_usize(*count).unwrap();
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for j in 0..c {
                                let onehot = if j == t { T::one() } else { T::zero() };
                                dl.set(r, j, w * (probs.get(r, j) - onehot));
                            }
                        }
                    }
                    send(*logits, dl);
                }
                Op::Sum(terms) => {
                    for &t in terms {
                        send(t, gy.clone());
                    }
                }
            }
        }
        result
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (value, deriv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks every parameter gradient of `f` against central differences.
    fn check(params: &ParamStore<f64>, f: impl Fn(&mut Graph<f64>) -> Var) {
        let g = {
            let mut graph = Graph::new(params);
            let out = f(&mut graph);
            graph.backward(out)
        };
        let h = 1e-5;
        for (id, entry) in params.entries().iter().enumerate() {
            let analytic = g.get(id).cloned().unwrap_or_else(|| Matrix::zeros(entry.value.rows(), entry.value.cols()));
            for k in 0..entry.value.data().len() {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p.entries_mut()[id].value.data_mut()[k] += delta;
                    let mut graph = Graph::new(&p);
                    let out = f(&mut graph);
                    graph.scalar(out)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[k];
                let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                assert!(err < 1e-6 || (a - numeric).abs() < 1e-9, "{}[{k}]: {a} vs {numeric}", entry.name);
            }
        }
    }

    #[test]
    fn gradients_of_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamStore::new();
        p.insert("x", ParamGroup::Rest, random(&mut rng, 4, 6));
        p.insert("w", ParamGroup::Rest, random(&mut rng, 6, 6));
        p.insert("row", ParamGroup::Rest, random(&mut rng, 1, 6));
        p.insert("gamma", ParamGroup::Rest, random(&mut rng, 1, 6));
        p.insert("beta", ParamGroup::Rest, random(&mut rng, 1, 6));
        p.insert("table", ParamGroup::Rest, random(&mut rng, 5, 6));
        let drop = random(&mut rng, 4, 6);
        let mask: Vec<bool> = (0..16).map(|i| i % 4 <= i / 4).collect();
        check(&p, |g| {
            let x = g.param("x");
            let w = g.param("w");
            let h = g.matmul(x, w);
            let row = g.param("row");
            let h = g.add_row(h, row);
            let h = g.gelu(h);
            let gamma = g.param("gamma");
            let beta = g.param("beta");
            let h = g.layer_norm(h, gamma, beta);
            let h = g.mul_const(h, drop.clone());
            let left = g.slice_cols(h, 0, 3);
            let right = g.slice_cols(h, 3, 3);
            let scores = g.matmul_nt(left, right);
            let scores = g.scale(scores, 0.7);
            let attn = g.masked_softmax(scores, &mask);
            let mixed = g.matmul(attn, right);
            let both = g.concat_cols(&[mixed, left]);
            let table = g.param("table");
            let emb = g.gather(table, &[1, 3, 1, 0]);
            let both = g.add(both, emb);
            let top = g.slice_rows(both, 0, 2);
            let bottom = g.slice_rows(both, 2, 2);
            let stacked = g.concat_rows(&[bottom, top]);
            let mean = g.mean_rows(stacked, &[0, 2, 3]);
            let all = g.concat_rows(&[stacked, mean]);
            let ce = g.cross_entropy(all, &[Some(1), None, Some(5), Some(0), Some(2)], None);
            let cols = [true, false, true, true, true, true];
            let ce2 = g.cross_entropy(top, &[Some(0), Some(4)], Some(&cols));
            g.sum(&[ce, ce2])
        });
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let p = ParamStore::<f64>::new();
        let mut g = Graph::new(&p);
        let l = g.constant(Matrix::zeros(3, 7));
        let ce = g.cross_entropy(l, &[Some(0), Some(3), None], None);
        assert!((g.scalar(ce) - 7f64.ln()).abs() < 1e-15);
    }
}
