//! Dynamic tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. Nodes are appended in evaluation order, so the tape index is a
//! topological order and backward is a single reverse sweep. The tape is
//! rebuilt on every forward pass; running backward twice on the same tape is
//! an error.

use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    MaskedSoftmax(Var, Vec<bool>),
    GroupDot(Var, Var),
    GroupWeightedSum(Var, Var),
    Reshape(Var),
    Custom(Var, fn(f64) -> f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use differentiation tape.
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// `c (n×p) += a (n×m) · b (m×p)`
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let crow = &mut c[i * p..(i + 1) * p];
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += aik * b);
        }
    }
}

/// `c (n×m) += g (n×p) · bᵀ` where `b` is `m×p`.
fn gemm_bt(g: &[f64], b: &[f64], c: &mut [f64], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let grow = &g[i * p..(i + 1) * p];
        for k in 0..m {
            let brow = &b[k * p..(k + 1) * p];
            c[i * m + k] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c (m×p) += aᵀ · g` where `a` is `n×m` and `g` is `n×p`.
fn gemm_at(a: &[f64], g: &[f64], c: &mut [f64], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let grow = &g[i * p..(i + 1) * p];
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c[k * p..(k + 1) * p];
            crow.iter_mut().zip(grow).for_each(|(c, &g)| *c += aik * g);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over one row, with optional mask
/// (`true` = position participates).
pub fn softmax_row(logits: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax logits"));
    }
    if let Some(m) = mask {
        if m.len() != logits.len() {
            return Err(Error::shape(
                "softmax_row",
                format!("mask {} vs logits {}", m.len(), logits.len()),
            ));
        }
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax_row"));
    }
    let live = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..logits.len())
        .filter(|&i| live(i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyAttentionSupport);
    }
    let mut out: Vec<f64> = (0..logits.len())
        .map(|i| {
            if live(i) {
                (logits[i] - max).exp()
            } else {
                0.0
            }
        })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Trainable leaf. Backward accumulates into the parameter's gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.value(id).clone(), Op::Param(id), true, "param")
    }

    /// A parameter read as a constant (stop-gradient).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.constant(store.value(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = dims(self.value(a));
        let (m2, p) = dims(self.value(b));
        if m != m2 {
            return Err(Error::shape("matmul", format!("{n}x{m} · {m2}x{p}")));
        }
        let mut out = vec![0.0; n * p];
        gemm(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            n,
            m,
            p,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, p, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a `1×m` row (e.g. a bias) to every row of an `n×m` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (n, m) = dims(tx);
        if tr.numel() != m {
            return Err(Error::shape(
                "add_row",
                format!("{n}x{m} + row of {}", tr.numel()),
            ));
        }
        let mut data = tx.data().to_vec();
        for r in 0..n {
            add_into(&mut data[r * m..(r + 1) * m], tr.data());
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow(x, row), rg, "add_row")
    }

    /// `a·x + b` elementwise.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Result<Var> {
        self.map(x, Op::Affine(x, a), "affine", move |v| a * v + b)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Result<Var> {
        self.affine(x, a, 0.0)
    }

    fn map(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(value, op, rg, name)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), "relu", |v| v.max(0.0))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Log(x), "log", f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x), "exp", f64::exp)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(x, Op::Clamp(x, lo, hi), "clamp", move |v| v.clamp(lo, hi))
    }

    /// Elementwise function with a caller-supplied derivative.
    pub fn custom(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        self.map(x, Op::Custom(x, df), "custom", f)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, "mean")
    }

    /// Row-wise inner product of two `n×m` matrices, giving `n×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if dims(ta) != dims(tb) {
            return Err(Error::shape(
                "row_dot",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (n, m) = dims(ta);
        let data = (0..n)
            .map(|r| {
                ta.data()[r * m..(r + 1) * m]
                    .iter()
                    .zip(&tb.data()[r * m..(r + 1) * m])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, 1, data)?, Op::RowDot(a, b), rg, "row_dot")
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput("concat parts"))?;
        let n = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if let Some(bad) = parts.iter().find(|&&p| self.value(p).rows() != n) {
            return Err(Error::shape(
                "concat_cols",
                format!("row count {} vs {n}", self.value(*bad).rows()),
            ));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::matrix(n, total, data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
            "concat_cols",
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = dims(self.value(x));
        if start >= end || end > m {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {m} columns"),
            ));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            data.extend_from_slice(&tx.row_slice(r)[start..end]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::matrix(n, end - start, data)?,
            Op::SliceCols(x, start),
            rg,
            "slice_cols",
        )
    }

    /// Selects rows by index; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (n, m) = dims(self.value(x));
        if idx.is_empty() {
            return Err(Error::EmptyInput("gather indices"));
        }
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * m);
        for i in idx {
            match i {
                Some(r) => data.extend_from_slice(tx.row_slice(*r)),
                None => data.extend(std::iter::repeat_n(0.0, m)),
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::matrix(idx.len(), m, data)?,
            Op::GatherRows(x, idx.to_vec()),
            rg,
            "gather_rows",
        )
    }

    /// Row-wise softmax over an `n×g` matrix with a flattened `n·g` mask.
    /// Rows with no live position produce all-zero weights.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, g) = dims(self.value(x));
        if mask.len() != n * g {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask {} for {n}x{g}", mask.len()),
            ));
        }
        let tx = self.value(x);
        let mut data = vec![0.0; n * g];
        for r in 0..n {
            let m = &mask[r * g..(r + 1) * g];
            if !m.iter().any(|&b| b) {
                continue;
            }
            let row = softmax_row(tx.row_slice(r), Some(m))?;
            data[r * g..(r + 1) * g].copy_from_slice(&row);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::matrix(n, g, data)?,
            Op::MaskedSoftmax(x, mask.to_vec()),
            rg,
            "masked_softmax",
        )
    }

    /// Per-group scores: `q` is `n×m`, `k` is `(n·g)×m`; row `b` of the
    /// `n×g` result holds `q[b]·k[b·g + j]` for `j < g`.
    pub fn group_dot(&mut self, q: Var, k: Var) -> Result<Var> {
        let (n, m) = dims(self.value(q));
        let (nk, mk) = dims(self.value(k));
        if m != mk || nk % n != 0 {
            return Err(Error::shape("group_dot", format!("q {n}x{m}, k {nk}x{mk}")));
        }
        let g = nk / n;
        let (tq, tk) = (self.value(q).data(), self.value(k).data());
        let mut data = vec![0.0; n * g];
        for b in 0..n {
            let qr = &tq[b * m..(b + 1) * m];
            for j in 0..g {
                let kr = &tk[(b * g + j) * m..(b * g + j + 1) * m];
                data[b * g + j] = qr.iter().zip(kr).map(|(x, y)| x * y).sum();
            }
        }
        let rg = self.rg(q) || self.rg(k);
        self.push(
            Tensor::matrix(n, g, data)?,
            Op::GroupDot(q, k),
            rg,
            "group_dot",
        )
    }

    /// Per-group weighted sums: `w` is `n×g`, `v` is `(n·g)×m`; row `b` of the
    /// `n×m` result is `Σ_j w[b,j]·v[b·g + j]`.
    pub fn group_weighted_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let (n, g) = dims(self.value(w));
        let (nv, m) = dims(self.value(v));
        if nv != n * g {
            return Err(Error::shape(
                "group_weighted_sum",
                format!("w {n}x{g}, v {nv}x{m}"),
            ));
        }
        let (tw, tv) = (self.value(w).data(), self.value(v).data());
        let mut data = vec![0.0; n * m];
        for b in 0..n {
            let out = &mut data[b * m..(b + 1) * m];
            for j in 0..g {
                let wj = tw[b * g + j];
                if wj == 0.0 {
                    continue;
                }
                let vr = &tv[(b * g + j) * m..(b * g + j + 1) * m];
                out.iter_mut().zip(vr).for_each(|(o, &x)| *o += wj * x);
            }
        }
        let rg = self.rg(w) || self.rg(v);
        self.push(
            Tensor::matrix(n, m, data)?,
            Op::GroupWeightedSum(w, v),
            rg,
            "group_weighted_sum",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg, "reshape")
    }

    /// Propagates d`loss`/d(node) to every node and accumulates parameter
    /// gradients into `store`. Every parameter leaf on the tape ends with a
    /// populated gradient, zero if unreachable from `loss`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads, store);
        }
        for node in &self.nodes {
            if let Op::Param(id) = node.op {
                if store.grad(id).is_none() {
                    store.accumulate_grad(id, &vec![0.0; node.value.numel()]);
                }
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Adds a contribution into the gradient slot of `v` if it needs one.
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::MatMul(a, b) => {
                let (n, m) = dims(val(*a));
                let p = val(*b).cols();
                send(*a, &mut |s| gemm_bt(g, val(*b).data(), s, n, m, p));
                send(*b, &mut |s| gemm_at(val(*a).data(), g, s, n, m, p));
            }
            Op::Add(a, b) => {
                send(*a, &mut |s| add_into(s, g));
                send(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |s| add_into(s, g));
                send(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                send(*a, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(db)
                        .for_each(|((x, gy), y)| *x += gy * y)
                });
                send(*b, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(da)
                        .for_each(|((x, gy), y)| *x += gy * y)
                });
            }
            Op::AddRow(x, row) => {
                send(*x, &mut |s| add_into(s, g));
                let m = val(*row).numel();
                send(*row, &mut |s| {
                    for chunk in g.chunks(m) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::Affine(x, a) => send(*x, &mut |s| {
                s.iter_mut().zip(g).for_each(|(d, gy)| *d += a * gy)
            }),
            Op::Sigmoid(x) => send(*x, &mut |s| {
                s.iter_mut()
                    .zip(g)
                    .zip(out.data())
                    .for_each(|((d, gy), y)| *d += gy * y * (1.0 - y))
            }),
            Op::Relu(x) => {
                let xv = val(*x).data();
                send(*x, &mut |s| {
                    s.iter_mut().zip(g).zip(xv).for_each(|((d, gy), &v)| {
                        if v > 0.0 {
                            *d += gy
                        }
                    })
                })
            }
            Op::Log(x) => {
                let xv = val(*x).data();
                send(*x, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(xv)
                        .for_each(|((d, gy), v)| *d += gy / v)
                })
            }
            Op::Exp(x) => send(*x, &mut |s| {
                s.iter_mut()
                    .zip(g)
                    .zip(out.data())
                    .for_each(|((d, gy), y)| *d += gy * y)
            }),
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x).data();
                send(*x, &mut |s| {
                    s.iter_mut().zip(g).zip(xv).for_each(|((d, gy), &v)| {
                        if v >= *lo && v <= *hi {
                            *d += gy
                        }
                    })
                })
            }
            Op::Custom(x, df) => {
                let xv = val(*x).data();
                send(*x, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(xv)
                        .for_each(|((d, gy), &v)| *d += gy * df(v))
                })
            }
            Op::Sum(x) => send(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                send(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::RowDot(a, b) => {
                let m = val(*a).cols();
                let (da, db) = (val(*a).data(), val(*b).data());
                send(*a, &mut |s| {
                    for (j, d) in s.iter_mut().enumerate() {
                        *d += g[j / m] * db[j];
                    }
                });
                send(*b, &mut |s| {
                    for (j, d) in s.iter_mut().enumerate() {
                        *d += g[j / m] * da[j];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    send(p, &mut |s| {
                        for (r, dst) in s.chunks_mut(w).enumerate() {
                            add_into(dst, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let m = val(*x).cols();
                let w = out.cols();
                send(*x, &mut |s| {
                    for (r, src) in g.chunks(w).enumerate() {
                        add_into(&mut s[r * m + start..r * m + start + w], src);
                    }
                })
            }
            Op::GatherRows(x, idx) => {
                let m = val(*x).cols();
                send(*x, &mut |s| {
                    for (src, i) in g.chunks(m).zip(idx) {
                        if let Some(r) = i {
                            add_into(&mut s[r * m..(r + 1) * m], src);
                        }
                    }
                })
            }
            Op::MaskedSoftmax(x, mask) => {
                let gw = out.cols();
                let y = out.data();
                send(*x, &mut |s| {
                    for r in 0..out.rows() {
                        let row = r * gw..(r + 1) * gw;
                        let dot: f64 = y[row.clone()]
                            .iter()
                            .zip(&g[row.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in row {
                            if mask[j] {
                                s[j] += y[j] * (g[j] - dot);
                            }
                        }
                    }
                })
            }
            Op::GroupDot(q, k) => {
                let (n, m) = dims(val(*q));
                let gw = out.cols();
                let (tq, tk) = (val(*q).data(), val(*k).data());
                send(*q, &mut |s| {
                    for b in 0..n {
                        for j in 0..gw {
                            let c = g[b * gw + j];
                            let kr = &tk[(b * gw + j) * m..(b * gw + j + 1) * m];
                            s[b * m..(b + 1) * m]
                                .iter_mut()
                                .zip(kr)
                                .for_each(|(d, x)| *d += c * x);
                        }
                    }
                });
                send(*k, &mut |s| {
                    for b in 0..n {
                        let qr = &tq[b * m..(b + 1) * m];
                        for j in 0..gw {
                            let c = g[b * gw + j];
                            s[(b * gw + j) * m..(b * gw + j + 1) * m]
                                .iter_mut()
                                .zip(qr)
                                .for_each(|(d, x)| *d += c * x);
                        }
                    }
                });
            }
            Op::GroupWeightedSum(w, v) => {
                let (n, gw) = dims(val(*w));
                let m = out.cols();
                let (tw, tv) = (val(*w).data(), val(*v).data());
                send(*w, &mut |s| {
                    for b in 0..n {
                        let gr = &g[b * m..(b + 1) * m];
                        for j in 0..gw {
                            let vr = &tv[(b * gw + j) * m..(b * gw + j + 1) * m];
                            s[b * gw + j] += gr.iter().zip(vr).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                send(*v, &mut |s| {
                    for b in 0..n {
                        let gr = &g[b * m..(b + 1) * m];
                        for j in 0..gw {
                            let c = tw[b * gw + j];
                            if c == 0.0 {
                                continue;
                            }
                            s[(b * gw + j) * m..(b * gw + j + 1) * m]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(d, x)| *d += c * x);
                        }
                    }
                });
            }
            Op::Reshape(x) => send(*x, &mut |s| add_into(s, g)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, t);
        (s, id)
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_row(&[0.0, 0.0], None).unwrap(), vec![0.5, 0.5]);
        let p = softmax_row(&[2f64.ln(), 0.0], None).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_masking() {
        let p = softmax_row(&[5.0, 1.0, 1.0], Some(&[false, true, true])).unwrap();
        assert_eq!(p[0], 0.0);
        assert_eq!(p[1], 0.5);
        assert!(matches!(
            softmax_row(&[1.0, 2.0], Some(&[false, false])),
            Err(Error::EmptyAttentionSupport)
        ));
        assert!(matches!(
            softmax_row(&[f64::NAN], None),
            Err(Error::NonFinite(_))
        ));
        assert!(softmax_row(&[f64::INFINITY, 0.0], None).is_err());
    }

    #[test]
    fn softmax_large_logits_are_stable() {
        let p = softmax_row(&[1000.0, 1000.0, -1000.0], None).unwrap();
        assert_eq!(p, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn square_derivative() {
        let (mut store, id) = store_with("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let x = g.param(&store, id).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y, &mut store).unwrap();
        assert_eq!(store.grad(id).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let (mut store, id) = store_with("x", Tensor::scalar(0.0));
        let mut g = Graph::new();
        let x = g.param(&store, id).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.scalar(y), 0.5);
        g.backward(y, &mut store).unwrap();
        assert_eq!(store.grad(id).unwrap().item(), 0.25);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = x + 2x + x·x at x = 2 → 3 + 2x = 7
        let (mut store, id) = store_with("x", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let x = g.param(&store, id).unwrap();
        let x2 = g.scale(x, 2.0).unwrap();
        let xx = g.mul(x, x).unwrap();
        let a = g.add(x, x2).unwrap();
        let y = g.add(a, xx).unwrap();
        g.backward(y, &mut store).unwrap();
        assert_eq!(store.grad(id).unwrap().item(), 7.0);
    }

    #[test]
    fn backward_errors() {
        let (mut store, id) = store_with("x", Tensor::row(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let x = g.param(&store, id).unwrap();
        assert!(matches!(
            g.backward(x, &mut store),
            Err(Error::NonScalarLoss(_))
        ));
        let s = g.sum(x).unwrap();
        g.backward(s, &mut store).unwrap();
        assert!(matches!(g.backward(s, &mut store), Err(Error::StaleGraph)));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(-1.0)).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite("log"))));
        let z = g.constant(Tensor::scalar(800.0)).unwrap();
        assert!(g.exp(z).is_err());
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0));
        let b = store.add("b", Tensor::scalar(1.0));
        let mut g = Graph::new();
        let va = g.param(&store, a).unwrap();
        let _vb = g.param(&store, b).unwrap();
        let y = g.mul(va, va).unwrap();
        g.backward(y, &mut store).unwrap();
        assert_eq!(store.grad(b).unwrap().item(), 0.0);
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let (mut store, id) = store_with("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let x = g.frozen(&store, id).unwrap();
        let c = g.constant(Tensor::scalar(1.0)).unwrap();
        let y = g.mul(x, c).unwrap();
        g.backward(y, &mut store).unwrap();
        assert!(store.grad(id).is_none());
    }

    #[test]
    fn chunk_then_concat_is_identity() {
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.37 - 1.1).collect();
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::matrix(3, 4, data.clone()).unwrap())
            .unwrap();
        let a = g.slice_cols(x, 0, 2).unwrap();
        let b = g.slice_cols(x, 2, 4).unwrap();
        let y = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn all_masked_softmax_row_is_zero() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let p = g.masked_softmax(x, &[false, false, true, true]).unwrap();
        let d = g.value(p).data();
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert!((d[2] + d[3] - 1.0).abs() < 1e-15);
    }
}
