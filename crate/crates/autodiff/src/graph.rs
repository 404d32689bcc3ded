//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Parameters are read in place
//! from a borrowed [`ParamStore`]; asking for the same parameter twice returns
//! the same node, so its gradient accumulates in one buffer.
//!
//! Batched sequence ops use a time-major row layout: a sequence of `n` steps
//! over a batch of `B` rows is stored as an `(n·B) × D` matrix whose row
//! `i·B + b` holds step `i` of batch row `b`.

use std::collections::HashMap;

use crate::error::{shape_err, AutodiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{gemm_acc, Tensor};

/// Guard added inside every negative log-likelihood.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Unary(Var, UnaryKind),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    GroupMeanRows(Var, Vec<Vec<usize>>),
    Sum(Var),
    SumCols(Var),
    MaxCols(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    BatchedDot(Var, Var),
    BatchedWeightedSum(Var, Var),
    BlockAdd(Var, Var),
    GatherSum(Var, Vec<Vec<usize>>),
    NllRows(Var, Vec<Option<usize>>),
    Entropy(Var),
    MaskMul(Var, Tensor),
    WhereRows(Vec<bool>, Var, Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    param: Option<ParamId>,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(t), _) => t,
            (None, Some(p)) => self.params.get(p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Some(value),
            param: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(rows, cols))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param,
            value: None,
            param: Some(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta.shape(), tr.shape()));
        }
        let mut out = ta.clone();
        let r = tr.data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRow(a, row), out, &[a, row]))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("mul_col", ta.shape(), tc.shape()));
        }
        let mut out = ta.clone();
        for i in 0..out.rows() {
            let s = tc.get(i, 0);
            for o in out.row_mut(i) {
                *o *= s;
            }
        }
        Ok(self.push(Op::MulCol(a, col), out, &[a, col]))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(Op::Affine(x, scale), out, &[x])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.affine(x, k, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn apply_unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = match kind {
            UnaryKind::Tanh => t.map(f64::tanh),
            UnaryKind::Sigmoid => t.map(sigmoid),
            UnaryKind::Exp => t.map(f64::exp),
            UnaryKind::Log => {
                if let Some(bad) = t.data().iter().find(|v| !(**v > 0.0)) {
                    return Err(AutodiffError::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                t.map(f64::ln)
            }
        };
        Ok(self.push(Op::Unary(x, kind), out, &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.apply_unary(UnaryKind::Tanh, x).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.apply_unary(UnaryKind::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.apply_unary(UnaryKind::Exp, x).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply_unary(UnaryKind::Log, x)
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.cols() == 0 {
            return Err(shape_err("softmax_rows", t.shape(), (t.rows(), 1)));
        }
        let out = softmax_masked(t, None);
        Ok(self.push(Op::Softmax(x), out, &[x]))
    }

    /// Row-wise softmax over the entries where `keep` is true. Dropped entries
    /// behave as scores of −∞: they get exactly zero probability and zero
    /// gradient. `keep` is row-major with the shape of `x`; every row must
    /// keep at least one entry.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if keep.len() != t.len() {
            return Err(shape_err("masked_softmax_rows", t.shape(), (keep.len(), 1)));
        }
        for r in 0..t.rows() {
            if !keep[r * t.cols()..(r + 1) * t.cols()].iter().any(|&k| k) {
                return Err(AutodiffError::Domain {
                    op: "masked_softmax_rows",
                    detail: format!("row {r} is fully masked"),
                });
            }
        }
        let out = softmax_masked(t, Some(keep));
        Ok(self.push(Op::Softmax(x), out, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::Index {
            op: "concat_cols",
            index: 0,
            len: 0,
        })?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.0 != rows {
                return Err(shape_err("concat_cols", self.shape(*first), s));
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            for r in 0..rows {
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(shape_err("slice_cols", t.shape(), (start, start + len)));
        }
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols(x, start), out, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::Index {
            op: "concat_rows",
            index: 0,
            len: 0,
        })?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(*first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, parts))
    }

    /// Gathers rows `indices` of `x` (repeats allowed).
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut out = Tensor::zeros(indices.len(), t.cols());
        for (r, &i) in indices.iter().enumerate() {
            if i >= t.rows() {
                return Err(AutodiffError::Index {
                    op: "select_rows",
                    index: i,
                    len: t.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        Ok(self.push(Op::SelectRows(x, indices.to_vec()), out, &[x]))
    }

    /// Row `index` of an embedding table, as a `1 × d` tensor.
    pub fn embedding_lookup(&mut self, table: Var, index: usize) -> Result<Var> {
        let rows = self.value(table).rows();
        if index >= rows {
            return Err(AutodiffError::Index {
                op: "embedding_lookup",
                index,
                len: rows,
            });
        }
        self.select_rows(table, &[index])
    }

    /// Output row `g` is the mean of the rows of `x` listed in `groups[g]`.
    pub fn group_mean_rows(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(x);
        let mut out = Tensor::zeros(groups.len(), t.cols());
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(AutodiffError::Index {
                    op: "group_mean_rows",
                    index: g,
                    len: 0,
                });
            }
            let inv = 1.0 / members.len() as f64;
            let row = out.row_mut(g);
            for &i in members {
                if i >= t.rows() {
                    return Err(AutodiffError::Index {
                        op: "group_mean_rows",
                        index: i,
                        len: t.rows(),
                    });
                }
                for (o, v) in row.iter_mut().zip(t.row(i)) {
                    *o += v;
                }
            }
            for o in row.iter_mut() {
                *o *= inv;
            }
        }
        Ok(self.push(Op::GroupMeanRows(x, groups.to_vec()), out, &[x]))
    }

    /// Sum of all entries, as `1 × 1`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    /// Per-row sums, as `m × 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(t.rows(), 1, data).expect("sized");
        self.push(Op::SumCols(x), out, &[x])
    }

    /// Per-row maxima, as `m × 1`. The gradient flows to the first maximal
    /// entry of each row.
    pub fn max_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.cols() == 0 {
            return Err(shape_err("max_cols", t.shape(), (t.rows(), 1)));
        }
        let arg: Vec<usize> = (0..t.rows()).map(|r| t.argmax_row(r)).collect();
        let data = arg.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let out = Tensor::from_vec(t.rows(), 1, data)?;
        Ok(self.push(Op::MaxCols(x, arg), out, &[x]))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x);
        if rows * cols != t.len() {
            return Err(shape_err("reshape", t.shape(), (rows, cols)));
        }
        let out = Tensor::from_vec(rows, cols, t.data().to_vec())?;
        Ok(self.push(Op::Reshape(x), out, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(Op::Transpose(x), out, &[x])
    }

    fn check_blocks(&self, op: &'static str, batch: Var, blocks: Var, match_cols: bool) -> Result<usize> {
        let (sb, sk) = (self.shape(batch), self.shape(blocks));
        let b = sb.0;
        if b == 0 || sk.0 % b != 0 || (match_cols && sb.1 != sk.1) {
            return Err(shape_err(op, sb, sk));
        }
        Ok(sk.0 / b)
    }

    /// `out[b, i] = q[b] · keys[i·B + b]` for `q: B × D`, `keys: (n·B) × D`.
    pub fn batched_dot(&mut self, q: Var, keys: Var) -> Result<Var> {
        let n = self.check_blocks("batched_dot", q, keys, true)?;
        let (tq, tk) = (self.value(q), self.value(keys));
        let b = tq.rows();
        let mut out = Tensor::zeros(b, n);
        for r in 0..b {
            let qr = tq.row(r);
            for i in 0..n {
                out.set(r, i, dot(qr, tk.row(i * b + r)));
            }
        }
        Ok(self.push(Op::BatchedDot(q, keys), out, &[q, keys]))
    }

    /// `out[b] = Σ_i w[b, i] · values[i·B + b]` for `w: B × n`,
    /// `values: (n·B) × D`.
    pub fn batched_weighted_sum(&mut self, w: Var, values: Var) -> Result<Var> {
        let n = self.check_blocks("batched_weighted_sum", w, values, false)?;
        let (tw, tv) = (self.value(w), self.value(values));
        if tw.cols() != n {
            return Err(shape_err("batched_weighted_sum", tw.shape(), tv.shape()));
        }
        let b = tw.rows();
        let mut out = Tensor::zeros(b, tv.cols());
        for r in 0..b {
            for i in 0..n {
                let wi = tw.get(r, i);
                if wi == 0.0 {
                    continue;
                }
                for (o, v) in out.row_mut(r).iter_mut().zip(tv.row(i * b + r)) {
                    *o += wi * v;
                }
            }
        }
        Ok(self.push(Op::BatchedWeightedSum(w, values), out, &[w, values]))
    }

    /// Adds row `b` of `y: B × D` to every row `i·B + b` of `x: (n·B) × D`.
    pub fn block_add(&mut self, x: Var, y: Var) -> Result<Var> {
        self.check_blocks("block_add", y, x, true)?;
        let (tx, ty) = (self.value(x), self.value(y));
        let b = ty.rows();
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, v) in out.row_mut(r).iter_mut().zip(ty.row(r % b)) {
                *o += v;
            }
        }
        Ok(self.push(Op::BlockAdd(x, y), out, &[x, y]))
    }

    /// `out[r] = Σ_{j ∈ indices[r]} x[r, j]`, as `m × 1`.
    pub fn gather_sum(&mut self, x: Var, indices: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(x);
        if indices.len() != t.rows() {
            return Err(shape_err("gather_sum", t.shape(), (indices.len(), 1)));
        }
        let mut data = Vec::with_capacity(t.rows());
        for (r, idx) in indices.iter().enumerate() {
            let mut s = 0.0;
            for &j in idx {
                if j >= t.cols() {
                    return Err(AutodiffError::Index {
                        op: "gather_sum",
                        index: j,
                        len: t.cols(),
                    });
                }
                s += t.get(r, j);
            }
            data.push(s);
        }
        let out = Tensor::from_vec(t.rows(), 1, data)?;
        Ok(self.push(Op::GatherSum(x, indices.to_vec()), out, &[x]))
    }

    /// `−log(p[target] + LOG_EPS)` for a `1 × n` probability row.
    pub fn nll_of_prob(&mut self, p: Var, target: usize) -> Result<Var> {
        let t = self.value(p);
        if t.rows() != 1 {
            return Err(shape_err("nll_of_prob", t.shape(), (1, t.cols())));
        }
        if (t.sum() - 1.0).abs() > 1e-6 {
            return Err(AutodiffError::Domain {
                op: "nll_of_prob",
                detail: format!("row sums to {}", t.sum()),
            });
        }
        self.nll_rows(p, &[Some(target)])
    }

    /// `Σ_r −log(p[r, t_r] + LOG_EPS)` over rows whose target is present.
    pub fn nll_rows(&mut self, p: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(p);
        if targets.len() != t.rows() {
            return Err(shape_err("nll_rows", t.shape(), (targets.len(), 1)));
        }
        let mut s = 0.0;
        for (r, tg) in targets.iter().enumerate() {
            if let Some(j) = *tg {
                if j >= t.cols() {
                    return Err(AutodiffError::Index {
                        op: "nll",
                        index: j,
                        len: t.cols(),
                    });
                }
                s -= (t.get(r, j) + LOG_EPS).ln();
            }
        }
        Ok(self.push(Op::NllRows(p, targets.to_vec()), Tensor::scalar(s), &[p]))
    }

    /// Shannon entropy in nats of each row, as `m × 1`. Zero entries
    /// contribute nothing.
    pub fn entropy_rows(&mut self, p: Var) -> Result<Var> {
        let t = self.value(p);
        let mut data = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let mut h = 0.0;
            for &v in t.row(r) {
                if v < 0.0 {
                    return Err(AutodiffError::Domain {
                        op: "entropy_rows",
                        detail: format!("negative probability {v}"),
                    });
                }
                if v > 0.0 {
                    h -= v * v.ln();
                }
            }
            data.push(h);
        }
        let out = Tensor::from_vec(t.rows(), 1, data)?;
        Ok(self.push(Op::Entropy(p), out, &[p]))
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != mask.shape() {
            return Err(shape_err("mask_mul", t.shape(), mask.shape()));
        }
        let data = t.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::from_vec(t.rows(), t.cols(), data)?;
        Ok(self.push(Op::MaskMul(x, mask), out, &[x]))
    }

    /// Zeroes the rows where `keep` is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if keep.len() != rows {
            return Err(shape_err("mask_rows", (rows, cols), (keep.len(), 1)));
        }
        if keep.iter().all(|&k| k) {
            return Ok(x);
        }
        let mut mask = Tensor::zeros(rows, cols);
        for (r, &k) in keep.iter().enumerate() {
            if k {
                mask.row_mut(r).fill(1.0);
            }
        }
        self.mask_mul(x, mask)
    }

    /// Row `r` of the output is row `r` of `a` where `take_a[r]`, else of `b`.
    pub fn where_rows(&mut self, take_a: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape("where_rows", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if take_a.len() != ta.rows() {
            return Err(shape_err("where_rows", ta.shape(), (take_a.len(), 1)));
        }
        let mut out = tb.clone();
        for (r, &k) in take_a.iter().enumerate() {
            if k {
                out.row_mut(r).copy_from_slice(ta.row(r));
            }
        }
        Ok(self.push(Op::WhereRows(take_a.to_vec(), a, b), out, &[a, b]))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Evaluation mode and `rate == 0` return `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::Domain {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let (rows, cols) = self.shape(x);
        let mask = dropout_mask(rows, cols, rate, rng);
        self.mask_mul(x, mask)
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(shape_err("backward", shape, (1, 1)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let param_grads = self
            .param_nodes
            .iter()
            .map(|(&p, &v)| (p, v))
            .collect();
        Ok(Gradients {
            grads,
            param_nodes: param_grads,
            num_params: self.params.len(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.nodes[i].value.as_ref();
        match &self.nodes[i].op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let buf = grad_buf(grads, *a, self.shape(*a));
                    gemm_acc(g, false, self.value(*b), true, buf);
                }
                if self.wants(*b) {
                    let buf = grad_buf(grads, *b, self.shape(*b));
                    gemm_acc(self.value(*a), true, g, false, buf);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf.data_mut(), g.data(), 1.0));
                self.acc(grads, *b, |buf| add_into(buf.data_mut(), g.data(), 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf.data_mut(), g.data(), 1.0));
                self.acc(grads, *b, |buf| add_into(buf.data_mut(), g.data(), -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |buf| {
                    for ((o, gv), bv) in buf.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gv * bv;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((o, gv), av) in buf.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |buf| add_into(buf.data_mut(), g.data(), 1.0));
                self.acc(grads, *row, |buf| {
                    for r in 0..g.rows() {
                        add_into(buf.data_mut(), g.row(r), 1.0);
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                self.acc(grads, *a, |buf| {
                    for r in 0..g.rows() {
                        add_into(buf.row_mut(r), g.row(r), tc.get(r, 0));
                    }
                });
                self.acc(grads, *col, |buf| {
                    for r in 0..g.rows() {
                        buf.data_mut()[r] += dot(g.row(r), ta.row(r));
                    }
                });
            }
            Op::Affine(x, k) => {
                self.acc(grads, *x, |buf| add_into(buf.data_mut(), g.data(), *k));
            }
            Op::Unary(x, kind) => {
                let y = out.expect("value");
                let tx = self.value(*x);
                self.acc(grads, *x, |buf| {
                    let it = buf.data_mut().iter_mut().zip(g.data()).zip(y.data().iter().zip(tx.data()));
                    for ((o, gv), (yv, xv)) in it {
                        *o += gv * match kind {
                            UnaryKind::Tanh => 1.0 - yv * yv,
                            UnaryKind::Sigmoid => yv * (1.0 - yv),
                            UnaryKind::Exp => *yv,
                            UnaryKind::Log => 1.0 / xv,
                        };
                    }
                });
            }
            Op::Softmax(x) => {
                let y = out.expect("value");
                self.acc(grads, *x, |buf| {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = dot(yr, gr);
                        for ((o, yv), gv) in buf.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - inner);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.shape(*p).1;
                    self.acc(grads, *p, |buf| {
                        for r in 0..g.rows() {
                            add_into(buf.row_mut(r), &g.row(r)[off..off + c], 1.0);
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols(x, start) => {
                let c = g.cols();
                self.acc(grads, *x, |buf| {
                    for r in 0..g.rows() {
                        add_into(&mut buf.row_mut(r)[*start..start + c], g.row(r), 1.0);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    let cols = g.cols();
                    self.acc(grads, *p, |buf| {
                        add_into(buf.data_mut(), &g.data()[off * cols..(off + rows) * cols], 1.0);
                    });
                    off += rows;
                }
            }
            Op::SelectRows(x, idx) => {
                self.acc(grads, *x, |buf| {
                    for (r, &j) in idx.iter().enumerate() {
                        add_into(buf.row_mut(j), g.row(r), 1.0);
                    }
                });
            }
            Op::GroupMeanRows(x, groups) => {
                self.acc(grads, *x, |buf| {
                    for (gi, members) in groups.iter().enumerate() {
                        let inv = 1.0 / members.len() as f64;
                        for &j in members {
                            add_into(buf.row_mut(j), g.row(gi), inv);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.acc(grads, *x, |buf| buf.data_mut().iter_mut().for_each(|o| *o += s));
            }
            Op::SumCols(x) => {
                self.acc(grads, *x, |buf| {
                    for r in 0..buf.rows() {
                        let s = g.data()[r];
                        buf.row_mut(r).iter_mut().for_each(|o| *o += s);
                    }
                });
            }
            Op::MaxCols(x, arg) => {
                self.acc(grads, *x, |buf| {
                    for (r, &c) in arg.iter().enumerate() {
                        let v = buf.get(r, c) + g.data()[r];
                        buf.set(r, c, v);
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |buf| add_into(buf.data_mut(), g.data(), 1.0));
            }
            Op::Transpose(x) => {
                let gt = g.transpose();
                self.acc(grads, *x, |buf| add_into(buf.data_mut(), gt.data(), 1.0));
            }
            Op::BatchedDot(q, keys) => {
                let (tq, tk) = (self.value(*q), self.value(*keys));
                let (b, n) = g.shape();
                self.acc(grads, *q, |buf| {
                    for r in 0..b {
                        for i in 0..n {
                            add_into(buf.row_mut(r), tk.row(i * b + r), g.get(r, i));
                        }
                    }
                });
                self.acc(grads, *keys, |buf| {
                    for r in 0..b {
                        for i in 0..n {
                            add_into(buf.row_mut(i * b + r), tq.row(r), g.get(r, i));
                        }
                    }
                });
            }
            Op::BatchedWeightedSum(w, values) => {
                let (tw, tv) = (self.value(*w), self.value(*values));
                let (b, n) = tw.shape();
                self.acc(grads, *w, |buf| {
                    for r in 0..b {
                        for i in 0..n {
                            let v = buf.get(r, i) + dot(g.row(r), tv.row(i * b + r));
                            buf.set(r, i, v);
                        }
                    }
                });
                self.acc(grads, *values, |buf| {
                    for r in 0..b {
                        for i in 0..n {
                            add_into(buf.row_mut(i * b + r), g.row(r), tw.get(r, i));
                        }
                    }
                });
            }
            Op::BlockAdd(x, y) => {
                self.acc(grads, *x, |buf| add_into(buf.data_mut(), g.data(), 1.0));
                let b = self.shape(*y).0;
                self.acc(grads, *y, |buf| {
                    for r in 0..g.rows() {
                        add_into(buf.row_mut(r % b), g.row(r), 1.0);
                    }
                });
            }
            Op::GatherSum(x, idx) => {
                self.acc(grads, *x, |buf| {
                    for (r, cols) in idx.iter().enumerate() {
                        let gr = g.data()[r];
                        for &c in cols {
                            let v = buf.get(r, c) + gr;
                            buf.set(r, c, v);
                        }
                    }
                });
            }
            Op::NllRows(p, targets) => {
                let tp = self.value(*p);
                let s = g.data()[0];
                self.acc(grads, *p, |buf| {
                    for (r, tg) in targets.iter().enumerate() {
                        if let Some(j) = *tg {
                            let v = buf.get(r, j) - s / (tp.get(r, j) + LOG_EPS);
                            buf.set(r, j, v);
                        }
                    }
                });
            }
            Op::Entropy(p) => {
                let tp = self.value(*p);
                self.acc(grads, *p, |buf| {
                    for r in 0..tp.rows() {
                        let gr = g.data()[r];
                        for (o, &v) in buf.row_mut(r).iter_mut().zip(tp.row(r)) {
                            if v > 0.0 {
                                *o -= gr * (v.ln() + 1.0);
                            }
                        }
                    }
                });
            }
            Op::MaskMul(x, mask) => {
                self.acc(grads, *x, |buf| {
                    for ((o, gv), m) in buf.data_mut().iter_mut().zip(g.data()).zip(mask.data()) {
                        *o += gv * m;
                    }
                });
            }
            Op::WhereRows(take_a, a, b) => {
                self.acc(grads, *a, |buf| {
                    for (r, &k) in take_a.iter().enumerate() {
                        if k {
                            add_into(buf.row_mut(r), g.row(r), 1.0);
                        }
                    }
                });
                self.acc(grads, *b, |buf| {
                    for (r, &k) in take_a.iter().enumerate() {
                        if !k {
                            add_into(buf.row_mut(r), g.row(r), 1.0);
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if self.wants(v) {
            f(grad_buf(grads, v, self.shape(v)));
        }
    }
}

fn grad_buf(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_masked(t: &Tensor, keep: Option<&[bool]>) -> Tensor {
    let (rows, cols) = t.shape();
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let kept = |c: usize| keep.is_none_or(|k| k[r * cols + c]);
        let row = t.row(r);
        let max = (0..cols)
            .filter(|&c| kept(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(r);
        let mut z = 0.0;
        for c in 0..cols {
            if kept(c) {
                o[c] = (row[c] - max).exp();
                z += o[c];
            }
        }
        for v in o.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// An inverted-dropout mask: entries are 0 with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut RngStream) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// Gradient buffers produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_nodes: Vec<(ParamId, Var)>,
    num_params: usize,
}

impl Gradients {
    /// The gradient of the loss with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// One entry per parameter of the store; `None` where the loss does not
    /// depend on the parameter.
    pub fn into_param_grads(mut self) -> ParamGrads {
        let mut out = vec![None; self.num_params];
        for (p, v) in self.param_nodes {
            if let Some(slot) = self.grads.get_mut(v.0) {
                out[p.index()] = slot.take();
            }
        }
        ParamGrads(out)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamGrads(pub Vec<Option<Tensor>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.index()).and_then(Option::as_ref)
    }

    /// Adds `other` into `self`, scaled by `k`.
    pub fn accumulate(&mut self, other: &ParamGrads, k: f64) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (dst, src) in self.0.iter_mut().zip(&other.0) {
            if let Some(s) = src {
                let d = dst.get_or_insert_with(|| Tensor::zeros(s.rows(), s.cols()));
                add_into(d.data_mut(), s.data(), k);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            let k = max_norm / n;
            for t in self.0.iter_mut().flatten() {
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
}
