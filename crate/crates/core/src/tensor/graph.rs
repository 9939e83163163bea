//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order. Because a node is
//! only ever appended after its inputs, walking the tape backwards visits
//! nodes in reverse topological order, each exactly once.
//!
//! A graph is single-threaded. Independent samples get independent graphs,
//! which is how mini-batches fan out across threads.

use std::sync::Arc;

use super::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Mish(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ----- leaves -----

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` cut off from the graph; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.leaf_shared(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Arc<Tensor<T>>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, parents: &[Var], op: Op<T>) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Arc::new(value), rg, op)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(dim_err!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new([m, n], out)?;
        Ok(self.push_op(t, &[a, b], Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(dim_err!(
                "matmul_nt inner dimensions differ: {:?} x {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new([m, n], out)?;
        Ok(self.push_op(t, &[a, b], Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        Ok(self.push_op(t, &[x], Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push_op(t, &[x], Op::Reshape(x)))
    }

    // ----- elementwise -----

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err!(
                "{what}: shapes differ {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push_op(t, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push_op(t, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push_op(t, &[a, b], Op::Mul(a, b)))
    }

    fn row_broadcast_check(&self, x: Var, row: Var, what: &str) -> Result<(usize, usize)> {
        let (r, c) = self.dims2(x)?;
        if self.value(row).len() != c {
            return Err(dim_err!(
                "{what}: row vector {:?} does not match columns of {:?}",
                self.value(row).shape(),
                self.value(x).shape()
            ));
        }
        Ok((r, c))
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c) = self.row_broadcast_check(x, b, "add_row")?;
        let bv = self.value(b).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % c])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(t, &[x, b], Op::AddRow(x, b)))
    }

    /// `x ⊙ s` with `s` broadcast over rows (right-multiplication by `diag(s)`).
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, c) = self.row_broadcast_check(x, s, "mul_row")?;
        let sv = self.value(s).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i % c])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(t, &[x, s], Op::MulRow(x, s)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push_op(t, &[x], Op::Scale(x, factor))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_value);
        self.push_op(t, &[x], Op::Gelu(x))
    }

    pub fn mish(&mut self, x: Var) -> Var {
        let t = self.value(x).map(mish_value);
        self.push_op(t, &[x], Op::Mish(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        self.push_op(t, &[x], Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push_op(t, &[x], Op::Relu(x))
    }

    // ----- reductions -----

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push_op(t, &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(dim_err!("mean of an empty tensor"));
        }
        let t = Tensor::scalar(self.value(x).sum() / T::c(n as f64));
        Ok(self.push_op(t, &[x], Op::Mean(x)))
    }

    // ----- normalization -----

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax axis {axis} out of range for {:?}", shape));
        }
        if !xv.all_finite() {
            return Err(Error::Numeric("softmax input contains NaN or infinity".into()));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..len).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(t, &[x], Op::Softmax { x, len, inner }))
    }

    /// Layer normalization over the last axis with per-channel gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, d) = self.dims2(x)?;
        if d == 0 {
            return Err(dim_err!("layer_norm over a zero-length axis"));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(dim_err!(
                "layer_norm affine parameters {:?}/{:?} do not match width {d}",
                self.value(gain).shape(),
                self.value(bias).shape()
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let inv_d = T::one() / T::c(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push_op(
            t,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    // ----- slicing and assembly -----

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if start + len > r {
            return Err(dim_err!("rows {start}..{} out of range for {r} rows", start + len));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new([len, c], data)?;
        Ok(self.push_op(t, &[x], Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if start + len > c {
            return Err(dim_err!("cols {start}..{} out of range for {c} cols", start + len));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new([r, len], data)?;
        Ok(self.push_op(t, &[x], Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(dim_err!("concat_rows of nothing"));
        };
        let (_, c) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p)?;
            if pc != c {
                return Err(dim_err!(
                    "concat_rows width mismatch: {:?} vs {:?}",
                    self.value(first).shape(),
                    self.value(p).shape()
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new([rows, c], data)?;
        Ok(self.push_op(t, parts, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(dim_err!("concat_cols of nothing"));
        };
        let (r, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pr != r {
                return Err(dim_err!(
                    "concat_cols height mismatch: {:?} vs {:?}",
                    self.value(first).shape(),
                    self.value(p).shape()
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new([r, total], data)?;
        Ok(self.push_op(t, parts, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows of `x` picked by `index` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(dim_err!("row index {i} out of range for {r} rows"));
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new([index.len(), c], data)?;
        Ok(self.push_op(
            t,
            &[x],
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    // ----- losses -----

    /// Mean over rows of `−log softmax(logits)[label]`, in log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.dims2(logits)?;
        if labels.len() != rows {
            return Err(dim_err!(
                "cross_entropy: {} labels for {rows} rows of logits",
                labels.len()
            ));
        }
        if rows == 0 {
            return Err(Error::Contract("cross_entropy over zero rows".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "class index {bad} out of range for {classes} classes"
            )));
        }
        let z = self.value(logits).data();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cross_entropy logits are not finite".into()));
        }
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &z[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
            total = total + (lse - row[labels[r]]);
        }
        let t = Tensor::scalar(total / T::c(rows as f64));
        Ok(self.push_op(
            t,
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ----- backward -----

    /// Clears every gradient so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; call zero_grad before accumulating again"
                    .into(),
            ));
        }
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Contract(
                "loss is not connected to any tensor that requires a gradient".into(),
            ));
        }
        let seed = Tensor::ones(node.value.shape().to_vec());
        self.nodes[loss.0].grad = Some(seed);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_backward(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (parent, grad) in contributions {
                self.accumulate(parent, grad);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn local_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        let gd = g.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let (_, n) = self.dims2(*b)?;
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm_nt(m, n, k, gd, self.value(*b).data(), &mut da);
                    out.push((*a, Tensor::new(self.value(*a).shape().to_vec(), da)?));
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm_tn(k, m, n, self.value(*a).data(), gd, &mut db);
                    out.push((*b, Tensor::new(self.value(*b).shape().to_vec(), db)?));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let (n, _) = self.dims2(*b)?;
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, self.value(*b).data(), &mut da);
                    out.push((*a, Tensor::new(self.value(*a).shape().to_vec(), da)?));
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); n * k];
                    T::gemm_tn(n, m, k, gd, self.value(*a).data(), &mut db);
                    out.push((*b, Tensor::new(self.value(*b).shape().to_vec(), db)?));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    out.push((*a, g.clone()));
                }
                if wants(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    out.push((*a, g.clone()));
                }
                if wants(*b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, self.zip_grad(g, *b, |gv, bv| gv * bv)));
                }
                if wants(*b) {
                    out.push((*b, self.zip_grad(g, *a, |gv, av| gv * av)));
                }
            }
            Op::AddRow(x, b) => {
                if wants(*x) {
                    out.push((*x, g.clone()));
                }
                if wants(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![T::zero(); c];
                    for (j, &v) in gd.iter().enumerate() {
                        db[j % c] = db[j % c] + v;
                    }
                    out.push((*b, Tensor::new(self.value(*b).shape().to_vec(), db)?));
                }
            }
            Op::MulRow(x, s) => {
                let sv = self.value(*s).data();
                let c = sv.len();
                if wants(*x) {
                    let dx = gd.iter().enumerate().map(|(j, &v)| v * sv[j % c]).collect();
                    out.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
                }
                if wants(*s) {
                    let xv = self.value(*x).data();
                    let mut ds = vec![T::zero(); c];
                    for (j, (&gv, &xv)) in gd.iter().zip(xv).enumerate() {
                        ds[j % c] = ds[j % c] + gv * xv;
                    }
                    out.push((*s, Tensor::new(self.value(*s).shape().to_vec(), ds)?));
                }
            }
            Op::Scale(x, f) => {
                if wants(*x) {
                    let f = *f;
                    out.push((*x, g.map(|v| v * f)));
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    out.push((*x, g.transpose()?));
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    out.push((*x, g.reshape(self.value(*x).shape().to_vec())?));
                }
            }
            Op::Softmax { x, len, inner } => {
                if wants(*x) {
                    let (len, inner) = (*len, *inner);
                    let y = node.value.data();
                    let outer = y.len() / (len * inner).max(1);
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: T = (0..len)
                                .map(|j| gd[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let k = base + j * inner;
                                dx[k] = y[k] * (gd[k] - dot);
                            }
                        }
                    }
                    out.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let rows = rstd.len();
                let gv = self.value(*gain).data();
                if wants(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (k, (&gk, &h)) in gd.iter().zip(xhat).enumerate() {
                        dg[k % d] = dg[k % d] + gk * h;
                    }
                    out.push((*gain, Tensor::new(self.value(*gain).shape().to_vec(), dg)?));
                }
                if wants(*bias) {
                    let mut db = vec![T::zero(); d];
                    for (k, &gk) in gd.iter().enumerate() {
                        db[k % d] = db[k % d] + gk;
                    }
                    out.push((*bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?));
                }
                if wants(*x) {
                    let inv_d = T::one() / T::c(d as f64);
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for k in span.clone() {
                            let dh = gd[k] * gv[k - r * d];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[k];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for k in span {
                            let dh = gd[k] * gv[k - r * d];
                            dx[k] = rstd[r] * (dh - mean_dh - xhat[k] * mean_dh_h);
                        }
                    }
                    out.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?));
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    out.push((*x, self.zip_grad(g, *x, |gv, xv| gv * gelu_derivative(xv))));
                }
            }
            Op::Mish(x) => {
                if wants(*x) {
                    out.push((*x, self.zip_grad(g, *x, |gv, xv| gv * mish_derivative(xv))));
                }
            }
            Op::Tanh(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let dx = gd
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                        .collect();
                    out.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    out.push((
                        *x,
                        self.zip_grad(g, *x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }),
                    ));
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    out.push((*x, Tensor::full(self.value(*x).shape().to_vec(), gd[0])));
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = T::c(self.value(*x).len() as f64);
                    out.push((*x, Tensor::full(self.value(*x).shape().to_vec(), gd[0] / n)));
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let (_, c) = self.dims2(*x)?;
                    let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                    dx.data_mut()[start * c..start * c + gd.len()].copy_from_slice(gd);
                    out.push((*x, dx));
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (r, c) = self.dims2(*x)?;
                    let w = g.dims2()?.1;
                    let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                    for i in 0..r {
                        dx.data_mut()[i * c + start..i * c + start + w]
                            .copy_from_slice(&gd[i * w..(i + 1) * w]);
                    }
                    out.push((*x, dx));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if wants(p) {
                        let piece = gd[offset..offset + n].to_vec();
                        out.push((p, Tensor::new(self.value(p).shape().to_vec(), piece)?));
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2()?;
                let mut col = 0;
                for &p in parts {
                    let w = self.dims2(p)?.1;
                    if wants(p) {
                        let mut piece = Vec::with_capacity(r * w);
                        for i in 0..r {
                            piece.extend_from_slice(&gd[i * total + col..i * total + col + w]);
                        }
                        out.push((p, Tensor::new(self.value(p).shape().to_vec(), piece)?));
                    }
                    col += w;
                }
            }
            Op::GatherRows { x, index } => {
                if wants(*x) {
                    let (_, c) = self.dims2(*x)?;
                    let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                    let dst = dx.data_mut();
                    for (k, &row) in index.iter().enumerate() {
                        for j in 0..c {
                            dst[row * c + j] = dst[row * c + j] + gd[k * c + j];
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let rows = labels.len();
                    let classes = probs.len() / rows;
                    let scale = gd[0] / T::c(rows as f64);
                    let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        dz[r * classes + l] = dz[r * classes + l] - scale;
                    }
                    out.push((*logits, Tensor::new(self.value(*logits).shape().to_vec(), dz)?));
                }
            }
        }
        Ok(out)
    }

    fn zip_grad(&self, g: &Tensor<T>, other: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = g
            .data()
            .iter()
            .zip(self.value(other).data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(g.shape().to_vec(), data).expect("gradient shape")
    }
}

/// GELU, tanh approximation.
pub fn gelu_value<T: Scalar>(x: T) -> T {
    let u = T::c(SQRT_2_OVER_PI) * (x + T::c(GELU_CUBIC) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let k = T::c(SQRT_2_OVER_PI);
    let c = T::c(GELU_CUBIC);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::c(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * c * x * x)
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mish: `x · tanh(ln(1 + eˣ))`.
pub fn mish_value<T: Scalar>(x: T) -> T {
    x * softplus(x).tanh()
}

fn mish_derivative<T: Scalar>(x: T) -> T {
    let t = softplus(x).tanh();
    t + x * (T::one() - t * t) * sigmoid(x)
}
