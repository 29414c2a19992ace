//! Explicit per-forward-pass gradient tape.
//!
//! Values live on the tape as [`Tensor`]s addressed by [`Var`] handles.
//! Every differentiable operation appends one node; [`Tape::backward`]
//! walks the nodes in strict reverse order and accumulates gradients
//! additively, so a value consumed twice receives both contributions.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var, Vec<f64>),
    NormalizeCols(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    SelectCols(Var, Var, Vec<bool>),
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    Im2Col3(Var, usize, usize),
    /// Scalar output with a precomputed local gradient over the input.
    ScalarFn(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it participates in differentiation iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.push_node(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push_node(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let mut t = Tensor::from_parts(shape, data);
        t.requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.push_node(t, op)
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape_of(a), &self.shape_of(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(vec![m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        if k != k2 {
            return Err(Error::shape("matmul_bt", &self.shape_of(a), &self.shape_of(b)));
        }
        let out = kernels::matmul_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(vec![m, n], out, &[a, b], Op::MatMulBt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), &[a], Op::Transpose(a))
    }

    // ---- elementwise ---------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(op, &self.shape_of(a), &self.shape_of(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(self.shape_of(a), data, &[a, b], op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.push(self.shape_of(a), data, &[a], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_broadcast(&mut self, op_name: &'static str, a: Var, b: Var, mul: bool) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(b).numel() != c {
            return Err(Error::shape(op_name, &self.shape_of(a), &self.shape_of(b)));
        }
        let bv = self.value(b).data();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(c.max(1))
            .flat_map(|row| {
                row.iter()
                    .zip(bv)
                    .map(|(&x, &y)| if mul { x * y } else { x + y })
                    .collect::<Vec<_>>()
            })
            .collect();
        let op = if mul { Op::MulRow(a, b) } else { Op::AddRow(a, b) };
        Ok(self.push(self.shape_of(a), data, &[a, b], op))
    }

    /// `a[N×C] + b[C]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, b, false)
    }

    /// `a[N×C] ⊙ g[C]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, g: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, g, true)
    }

    /// Scales row `i` of `a[N×C]` by `s[i]` (`s` has `N` elements).
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (n, c) = dims2(self.value(a));
        if self.value(s).numel() != n {
            return Err(Error::shape("mul_col", &self.shape_of(a), &self.shape_of(s)));
        }
        let sv = self.value(s).data();
        let av = self.value(a).data();
        let data = (0..n * c).map(|i| av[i] * sv[i / c]).collect();
        Ok(self.push(self.shape_of(a), data, &[a, s], Op::MulCol(a, s)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    /// `a · s` for a one-element `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", &self.shape_of(a), &self.shape_of(s)));
        }
        let k = self.value(s).item();
        Ok(self.map(a, Op::MulScalar(a, s), |x| x * k))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), kernels::gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    // ---- normalization -------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = dims2(self.value(a));
        let data = kernels::softmax_rows(self.value(a).data(), r, c);
        self.push(self.shape_of(a), data, &[a], Op::SoftmaxRows(a))
    }

    /// Zero mean, unit variance along the last axis (no affine).
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = dims2(self.value(a));
        let mut data = vec![0.0; r * c];
        let inv = kernels::normalize_strided(self.value(a).data(), &mut data, r, c, c, 1, eps);
        self.push(self.shape_of(a), data, &[a], Op::NormalizeRows(a, inv))
    }

    /// Zero mean, unit variance down each column (no affine).
    pub fn normalize_cols(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = dims2(self.value(a));
        let mut data = vec![0.0; r * c];
        let inv = kernels::normalize_strided(self.value(a).data(), &mut data, c, r, 1, c, eps);
        self.push(self.shape_of(a), data, &[a], Op::NormalizeCols(a, inv))
    }

    // ---- structural ----------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_rows"))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != c {
                return Err(Error::shape("concat_rows", &self.shape_of(first), &self.shape_of(p)));
            }
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(vec![rows, c], data, parts, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let r = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(Error::shape("concat_cols", &self.shape_of(first), &self.shape_of(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(vec![r, total], data, parts, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).slice_rows(start, len)?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), &[a], Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(a));
        if start + len > c {
            return Err(Error::arg(format!("slice_cols {start}..{} out of {c}", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(vec![r, len], data, &[a], Op::SliceCols(a, start)))
    }

    /// Rows of `a` at `idx` (repeats allowed; gradients scatter-add).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.value(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::arg(format!("gather_rows index {bad} out of {r} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.value(a).row(i));
        }
        Ok(self.push(vec![idx.len(), c], data, &[a], Op::GatherRows(a, idx.to_vec())))
    }

    /// Writes row `k` of `src` into row `idx[k]` of a copy of the constant
    /// `fill`. Only `src` receives gradient.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], fill: &Tensor) -> Result<Var> {
        let c = self.value(src).cols();
        if fill.cols() != c || idx.len() != self.value(src).rows() {
            return Err(Error::shape("scatter_rows", &self.shape_of(src), fill.shape()));
        }
        let mut data = fill.data().to_vec();
        let n = fill.rows();
        for (k, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::arg(format!("scatter_rows index {i} out of {n} rows")));
            }
            data[i * c..(i + 1) * c].copy_from_slice(self.value(src).row(k));
        }
        Ok(self.push(vec![n, c], data, &[src], Op::ScatterRows(src, idx.to_vec())))
    }

    /// Column `j` comes from `b` where `mask[j]`, else from `a`.
    pub fn select_cols(&mut self, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape("select_cols", a, b)?;
        let c = self.value(a).cols();
        if mask.len() != c {
            return Err(Error::shape("select_cols", &self.shape_of(a), &[mask.len()]));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = (0..av.len())
            .map(|i| if mask[i % c] { bv[i] } else { av[i] })
            .collect();
        Ok(self.push(self.shape_of(a), data, &[a, b], Op::SelectCols(a, b, mask.to_vec())))
    }

    /// Mean over the row (token) axis: `[N×C] → [1×C]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(a));
        if r == 0 {
            return Err(Error::EmptyInput("mean_rows"));
        }
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, v) in data.iter_mut().zip(self.value(a).row(i)) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= r as f64;
        }
        Ok(self.push(vec![1, c], data, &[a], Op::MeanRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(vec![1], vec![s], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(shape.to_vec(), t.into_data(), &[a], Op::Reshape(a)))
    }

    /// 3×3 padding-1 neighbourhood extraction over an `h×w` grid stored as
    /// `[h·w × C]`; the result `[h·w × 9C]` times a `[9C × C']` kernel is a
    /// same-size convolution.
    pub fn im2col3(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(a));
        if r != h * w {
            return Err(Error::shape("im2col3", &self.shape_of(a), &[h, w]));
        }
        let data = kernels::im2col3(self.value(a).data(), h, w, c);
        Ok(self.push(vec![r, 9 * c], data, &[a], Op::Im2Col3(a, h, w)))
    }

    /// Records a scalar computed outside the tape from `input`'s value,
    /// together with its gradient with respect to every input element.
    pub fn scalar_fn(&mut self, input: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.value(input).numel() {
            return Err(Error::shape("scalar_fn", &self.shape_of(input), &[local_grad.len()]));
        }
        Ok(self.push(vec![1], vec![value], &[input], Op::ScalarFn(input, local_grad)))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse-mode pass from a scalar `loss`. May run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Tape("loss is detached from every trainable leaf".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].value.requires_grad;
        // Accumulates into the gradient buffer of `v`, allocating on first use.
        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(val(*a));
                let n = val(*b).cols();
                if wants(*a) {
                    let s = slot(grads, *a, m * k);
                    kernels::matmul_bt_acc(g, val(*b).data(), m, n, k, s);
                }
                if wants(*b) {
                    let s = slot(grads, *b, k * n);
                    kernels::matmul_at_acc(val(*a).data(), g, m, k, n, s);
                }
            }
            Op::MatMulBt(a, b) => {
                // out[m×n] = a[m×k]·b[n×k]ᵀ
                let (m, k) = dims2(val(*a));
                let n = val(*b).rows();
                if wants(*a) {
                    let s = slot(grads, *a, m * k);
                    let d = kernels::matmul(g, val(*b).data(), m, n, k);
                    s.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    let s = slot(grads, *b, n * k);
                    kernels::matmul_at_acc(g, val(*a).data(), m, n, k, s);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = dims2(out);
                    let s = slot(grads, *a, r * c);
                    for p in 0..r {
                        for q in 0..c {
                            s[q * r + p] += g[p * c + q];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    let s = slot(grads, *a, g.len());
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    let s = slot(grads, *b, g.len());
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b).data();
                    let s = slot(grads, *a, g.len());
                    for k in 0..g.len() {
                        s[k] += g[k] * bv[k];
                    }
                }
                if wants(*b) {
                    let av = val(*a).data();
                    let s = slot(grads, *b, g.len());
                    for k in 0..g.len() {
                        s[k] += g[k] * av[k];
                    }
                }
            }
            Op::AddRow(a, b) => {
                let c = out.cols();
                if wants(*a) {
                    let s = slot(grads, *a, g.len());
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    let s = slot(grads, *b, c);
                    for (k, &gv) in g.iter().enumerate() {
                        s[k % c] += gv;
                    }
                }
            }
            Op::MulRow(a, w) => {
                let c = out.cols();
                let (av, wv) = (val(*a).data(), val(*w).data());
                if wants(*a) {
                    let s = slot(grads, *a, g.len());
                    for k in 0..g.len() {
                        s[k] += g[k] * wv[k % c];
                    }
                }
                if wants(*w) {
                    let s = slot(grads, *w, c);
                    for k in 0..g.len() {
                        s[k % c] += g[k] * av[k];
                    }
                }
            }
            Op::MulCol(a, sc) => {
                let c = out.cols();
                let (av, sv) = (val(*a).data(), val(*sc).data());
                if wants(*a) {
                    let s = slot(grads, *a, g.len());
                    for k in 0..g.len() {
                        s[k] += g[k] * sv[k / c];
                    }
                }
                if wants(*sc) {
                    let s = slot(grads, *sc, sv.len());
                    for k in 0..g.len() {
                        s[k / c] += g[k] * av[k];
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    let s = slot(grads, *a, g.len());
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::MulScalar(a, k) => {
                let kv = val(*k).item();
                if wants(*a) {
                    let s = slot(grads, *a, g.len());
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += kv * y);
                }
                if wants(*k) {
                    let dot: f64 = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    slot(grads, *k, 1)[0] += dot;
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let av = val(*a).data();
                    let s = slot(grads, *a, g.len());
                    for k in 0..g.len() {
                        s[k] += g[k] * kernels::gelu_grad(av[k]);
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let av = val(*a).data();
                    let s = slot(grads, *a, g.len());
                    for k in 0..g.len() {
                        if av[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let y = out.data();
                    let s = slot(grads, *a, g.len());
                    for k in 0..g.len() {
                        s[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let (r, c) = dims2(out);
                    let y = out.data();
                    let s = slot(grads, *a, g.len());
                    for row in 0..r {
                        let span = row * c..(row + 1) * c;
                        let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(p, q)| p * q).sum();
                        for k in span {
                            s[k] += y[k] * (g[k] - dot);
                        }
                    }
                }
            }
            Op::NormalizeRows(a, inv) => {
                if wants(*a) {
                    let (r, c) = dims2(out);
                    let s = slot(grads, *a, g.len());
                    kernels::normalize_strided_backward(out.data(), g, inv, r, c, c, 1, s);
                }
            }
            Op::NormalizeCols(a, inv) => {
                if wants(*a) {
                    let (r, c) = dims2(out);
                    let s = slot(grads, *a, g.len());
                    kernels::normalize_strided_backward(out.data(), g, inv, c, r, 1, c, s);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).numel();
                    if wants(*p) {
                        let s = slot(grads, *p, n);
                        s.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dims2(out);
                let mut off = 0;
                for p in parts {
                    let c = val(*p).cols();
                    if wants(*p) {
                        let s = slot(grads, *p, r * c);
                        for row in 0..r {
                            for q in 0..c {
                                s[row * c + q] += g[row * total + off + q];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                if wants(*a) {
                    let c = out.cols();
                    let s = slot(grads, *a, val(*a).numel());
                    let base = start * c;
                    s[base..base + g.len()].iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::SliceCols(a, start) => {
                if wants(*a) {
                    let (r, len) = dims2(out);
                    let c = val(*a).cols();
                    let s = slot(grads, *a, r * c);
                    for row in 0..r {
                        for q in 0..len {
                            s[row * c + start + q] += g[row * len + q];
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if wants(*a) {
                    let c = out.cols();
                    let s = slot(grads, *a, val(*a).numel());
                    for (k, &row) in idx.iter().enumerate() {
                        for q in 0..c {
                            s[row * c + q] += g[k * c + q];
                        }
                    }
                }
            }
            Op::ScatterRows(src, idx) => {
                if wants(*src) {
                    let c = out.cols();
                    let s = slot(grads, *src, val(*src).numel());
                    for (k, &row) in idx.iter().enumerate() {
                        for q in 0..c {
                            s[k * c + q] += g[row * c + q];
                        }
                    }
                }
            }
            Op::SelectCols(a, b, mask) => {
                let c = out.cols();
                if wants(*a) {
                    let s = slot(grads, *a, g.len());
                    for k in 0..g.len() {
                        if !mask[k % c] {
                            s[k] += g[k];
                        }
                    }
                }
                if wants(*b) {
                    let s = slot(grads, *b, g.len());
                    for k in 0..g.len() {
                        if mask[k % c] {
                            s[k] += g[k];
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                if wants(*a) {
                    let (r, c) = dims2(val(*a));
                    let s = slot(grads, *a, r * c);
                    for k in 0..r * c {
                        s[k] += g[k % c] / r as f64;
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let n = val(*a).numel();
                    let s = slot(grads, *a, n);
                    s.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    let s = slot(grads, *a, g.len());
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Im2Col3(a, h, w) => {
                if wants(*a) {
                    let c = val(*a).cols();
                    let s = slot(grads, *a, h * w * c);
                    kernels::im2col3_backward(g, *h, *w, c, s);
                }
            }
            Op::ScalarFn(a, local) => {
                if wants(*a) {
                    let s = slot(grads, *a, local.len());
                    s.iter_mut().zip(local).for_each(|(x, y)| *x += g[0] * y);
                }
            }
        }
    }
}
