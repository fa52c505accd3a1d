//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation as a node whose parents precede it,
//! so the backward pass is a single reverse sweep. Handles ([`Var`]) are
//! plain indices into the tape. Gradients are returned as a separate
//! [`Gradients`] value; the tape itself is never mutated by `backward`, so
//! running it twice gives identical results.
//!
//! Only row-wise broadcasting exists (`add_row`); every other binary
//! operation requires identical shapes. Shape mismatches panic with both
//! shapes in the message.

use std::fmt;

use crate::voxel::max_pool_segments;

/// Dense row-major matrix. Vectors are `1 x n` or `n x 1`, scalars `1 x 1`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]{:?}", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape [{rows}, {cols}]",
            data.len()
        );
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(1, n, data)
    }

    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(n, 1, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SqNormRows(Var),
    NormalizeRows(Var),
    MaxRows(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const NORM_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Differentiable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.node(v).value.shape()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), [1, 1], "expected a scalar, got shape {:?}", t.shape());
        t.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.rows, ta.cols, data);
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|&x| f(x)).collect());
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("sub", a, b);
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("mul", a, b);
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (sa, sr) = (self.shape(a), self.shape(row));
        assert!(
            sr == [1, sa[1]],
            "add_row: expected row shape [1, {}], got {sr:?} (matrix {sa:?})",
            sa[1]
        );
        let (ta, tr) = (self.value(a), self.value(row));
        let mut data = ta.data.clone();
        for chunk in data.chunks_exact_mut(sa[1].max(1)) {
            for (d, r) in chunk.iter_mut().zip(&tr.data) {
                *d += r;
            }
        }
        let out = Tensor::new(sa[0], sa[1], data);
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa[1], sb[0], "matmul: inner dimensions differ, {sa:?} x {sb:?}");
        let out = matmul_raw(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Row-wise `log(softmax(a))`, computed without forming the softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut data = ta.data.clone();
        for row in data.chunks_exact_mut(ta.cols.max(1)) {
            let (top, m) = argmax_first(row);
            // ln(1 + rest) keeps precision when one logit dominates.
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != top)
                .map(|(_, x)| (x - m).exp())
                .sum();
            let log_z = rest.ln_1p();
            for x in row.iter_mut() {
                *x = (*x - m) - log_z;
            }
        }
        let out = Tensor::new(ta.rows, ta.cols, data);
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Squared L2 norm of each row, `n x 1`.
    pub fn sq_norm_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = (0..ta.rows)
            .map(|r| ta.row_slice(r).iter().map(|x| x * x).sum())
            .collect();
        let out = Tensor::new(ta.rows, 1, data);
        let rg = self.rg(&[a]);
        self.push(out, Op::SqNormRows(a), rg)
    }

    /// Scales each row to unit L2 norm; norms are floored at `1e-12`.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut data = ta.data.clone();
        for row in data.chunks_exact_mut(ta.cols.max(1)) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        let out = Tensor::new(ta.rows, ta.cols, data);
        let rg = self.rg(&[a]);
        self.push(out, Op::NormalizeRows(a), rg)
    }

    /// Row maximum, `n x 1`. Gradient goes to the first maximal column.
    pub fn max_rows(&mut self, a: Var) -> (Var, Vec<usize>) {
        let ta = self.value(a);
        assert!(ta.cols >= 1, "max_rows: rows are empty, shape {:?}", ta.shape());
        let mut vals = Vec::with_capacity(ta.rows);
        let mut arg = Vec::with_capacity(ta.rows);
        for r in 0..ta.rows {
            let (i, v) = argmax_first(ta.row_slice(r));
            vals.push(v);
            arg.push(i);
        }
        let out = Tensor::new(ta.rows, 1, vals);
        let rg = self.rg(&[a]);
        let v = self.push(out, Op::MaxRows(a, arg.clone()), rg);
        (v, arg)
    }

    /// Elementwise max over row segments (voxel max pooling). Output row `s`
    /// is the maximum over rows `segments[s]`; gradient goes to the winning
    /// row, the earliest listed one on ties.
    pub fn segment_max(&mut self, a: Var, segments: &[Vec<usize>]) -> Var {
        let ta = self.value(a);
        for seg in segments {
            for &r in seg {
                assert!(r < ta.rows, "segment_max: row {r} out of range for {:?}", ta.shape());
            }
        }
        let (vals, arg) = max_pool_segments(&ta.data, ta.cols, segments);
        let out = Tensor::new(segments.len(), ta.cols, vals);
        let rg = self.rg(&[a]);
        self.push(out, Op::SegmentMax(a, arg), rg)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * ta.cols);
        for &r in idx {
            assert!(r < ta.rows, "gather_rows: row {r} out of range for {:?}", ta.shape());
            data.extend_from_slice(ta.row_slice(r));
        }
        let out = Tensor::new(idx.len(), ta.cols, data);
        let rg = self.rg(&[a]);
        self.push(out, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Sums row `r` of `a` into output row `idx[r]`; output has `out_rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], out_rows: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(
            idx.len(),
            ta.rows,
            "scatter_add_rows: {} indices for shape {:?}",
            idx.len(),
            ta.shape()
        );
        let mut out = Tensor::zeros(out_rows, ta.cols);
        for (r, &dst) in idx.iter().enumerate() {
            assert!(dst < out_rows, "scatter_add_rows: target row {dst} >= {out_rows}");
            let src = ta.row_slice(r);
            for (o, s) in out.data[dst * ta.cols..(dst + 1) * ta.cols].iter_mut().zip(src) {
                *o += s;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::ScatterAddRows(a, idx.to_vec()), rg)
    }

    /// Picks column `cols[r]` from each row `r`, `n x 1`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        let ta = self.value(a);
        assert_eq!(cols.len(), ta.rows, "pick: {} columns for shape {:?}", cols.len(), ta.shape());
        let data = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < ta.cols, "pick: column {c} out of range for {:?}", ta.shape());
                ta.data[r * ta.cols + c]
            })
            .collect();
        let out = Tensor::new(ta.rows, 1, data);
        let rg = self.rg(&[a]);
        self.push(out, Op::Pick(a, cols.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(!t.is_empty(), "mean: empty tensor {:?}", t.shape());
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.shape(loss),
            [1, 1],
            "backward: loss must be a scalar, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, 1.0, g));
                self.acc(grads, *b, |d| axpy(d, 1.0, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, 1.0, g));
                self.acc(grads, *b, |d| axpy(d, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |d| axpy(d, 1.0, g));
                let cols = y.cols.max(1);
                self.acc(grads, *row, |d| {
                    for chunk in g.chunks_exact(cols) {
                        axpy(d, 1.0, chunk);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, m, k) = (ta.rows, ta.cols, tb.cols);
                // dA = G B^T, dB = A^T G
                self.acc(grads, *a, |d| gemm_acc(n, k, m, (g, k, 1), (&tb.data, 1, k), d));
                self.acc(grads, *b, |d| gemm_acc(m, n, k, (&ta.data, 1, m), (g, k, 1), d));
            }
            Op::Relu(a) => {
                let x = &self.value(*a).data;
                self.acc(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Exp(a) => self.acc(grads, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(&y.data) {
                    *d += g * y;
                }
            }),
            Op::Log(a) => {
                let x = &self.value(*a).data;
                self.acc(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        *d += g / x;
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = y.cols.max(1);
                self.acc(grads, *a, |d| {
                    for ((d, g), s) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.data.chunks_exact(cols))
                    {
                        let gs = dot(g, s);
                        for j in 0..cols {
                            d[j] += s[j] * (g[j] - gs);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = y.cols.max(1);
                self.acc(grads, *a, |d| {
                    for ((d, g), ls) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.data.chunks_exact(cols))
                    {
                        let gsum: f64 = g.iter().sum();
                        for j in 0..cols {
                            d[j] += g[j] - ls[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::SqNormRows(a) => {
                let x = self.value(*a);
                let cols = x.cols.max(1);
                self.acc(grads, *a, |d| {
                    for (r, (d, x)) in d.chunks_exact_mut(cols).zip(x.data.chunks_exact(cols)).enumerate() {
                        axpy(d, 2.0 * g[r], x);
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let cols = x.cols.max(1);
                self.acc(grads, *a, |d| {
                    for ((d, x), (g, yr)) in d
                        .chunks_exact_mut(cols)
                        .zip(x.data.chunks_exact(cols))
                        .zip(g.chunks_exact(cols).zip(y.data.chunks_exact(cols)))
                    {
                        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n < NORM_FLOOR {
                            axpy(d, 1.0 / NORM_FLOOR, g);
                            continue;
                        }
                        let yg = dot(yr, g);
                        for j in 0..cols {
                            d[j] += (g[j] - yr[j] * yg) / n;
                        }
                    }
                });
            }
            Op::MaxRows(a, arg) => {
                let cols = self.value(*a).cols;
                self.acc(grads, *a, |d| {
                    for (r, &c) in arg.iter().enumerate() {
                        d[r * cols + c] += g[r];
                    }
                });
            }
            Op::SegmentMax(a, arg) => {
                let cols = y.cols.max(1);
                self.acc(grads, *a, |d| {
                    for (e, &src) in arg.iter().enumerate() {
                        d[src * cols + e % cols] += g[e];
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let cols = y.cols;
                self.acc(grads, *a, |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut d[src * cols..(src + 1) * cols], 1.0, &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ScatterAddRows(a, idx) => {
                let cols = y.cols;
                self.acc(grads, *a, |d| {
                    for (r, &dst) in idx.iter().enumerate() {
                        axpy(&mut d[r * cols..(r + 1) * cols], 1.0, &g[dst * cols..(dst + 1) * cols]);
                    }
                });
            }
            Op::Pick(a, cols_idx) => {
                let cols = self.value(*a).cols;
                self.acc(grads, *a, |d| {
                    for (r, &c) in cols_idx.iter().enumerate() {
                        d[r * cols + c] += g[r];
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Scale(a, c) => self.acc(grads, *a, |d| axpy(d, *c, g)),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = self.node(v);
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no path from the loss reaches it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` with zeros where no path exists.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(d: &mut [f64], a: f64, x: &[f64]) {
    for (d, x) in d.iter_mut().zip(x) {
        *d += a * x;
    }
}

/// `(index, value)` of the first maximal element.
pub fn argmax_first(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul: inner dimensions differ");
    let mut out = vec![0.0; a.rows * b.cols];
    gemm_acc(a.rows, a.cols, b.cols, (&a.data, a.cols, 1), (&b.data, b.cols, 1), &mut out);
    Tensor::new(a.rows, b.cols, out)
}

/// `c += a * b` for row-major `c: m x n`; `a` is `m x k` and `b` is `k x n`,
/// each given as `(data, row stride, column stride)` so transposes are free.
fn gemm_acc(m: usize, k: usize, n: usize, a: (&[f64], usize, usize), b: (&[f64], usize, usize), c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(a.0.len() >= (m - 1) * a.1 + (k - 1) * a.2 + 1);
    assert!(b.0.len() >= (k - 1) * b.1 + (n - 1) * b.2 + 1);
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn softmax_rows(a: &Tensor) -> Tensor {
    let mut data = a.data.clone();
    for row in data.chunks_exact_mut(a.cols.max(1)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    Tensor::new(a.rows, a.cols, data)
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares a supplied gradient with central differences of `f` at `x`.
/// Relative error per coordinate uses `max(1, |analytic|, |numeric|)` as
/// the denominator.
pub fn compare_with_central_differences(
    f: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    analytic: &[f64],
    h: f64,
) -> GradCheck {
    assert!(h > 0.0, "step must be positive");
    assert_eq!(analytic.len(), x.len(), "gradient length does not match input");
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = 1.0f64.max(a.abs()).max(n.abs());
        let err = (a - n).abs() / denom;
        if err > max_rel_error || err.is_nan() {
            max_rel_error = err;
            worst_index = i;
        }
    }
    GradCheck {
        max_rel_error,
        worst_index,
        analytic: analytic.to_vec(),
        numeric,
    }
}

/// Checks the tape gradient of a scalar function against central
/// differences. `f` receives a fresh tape and the input as a parameter and
/// must return a `1 x 1` node.
pub fn grad_check(f: impl Fn(&mut Tape, Var) -> Var, x: &Tensor, h: f64) -> GradCheck {
    let eval = |t: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.param(t.clone());
        let out = f(&mut tape, v);
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v);
    assert_eq!(
        tape.shape(out),
        [1, 1],
        "grad_check: function output must be scalar, got {:?}",
        tape.shape(out)
    );
    let analytic = tape.backward(out).get_or_zeros(&tape, v);
    compare_with_central_differences(eval, x, &analytic, h)
}
