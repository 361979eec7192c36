use super::kernels::{
    gelu, gelu_grad, layer_norm_rows, log_softmax_rows, matmul_into, matmul_nt_into,
    matmul_tn_into, softmax_rows, transpose,
};
use super::{matrix_dims, Real, Tensor};
use crate::error::{Error, Result};
use crate::masking::BinaryMask;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
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
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    MeanRows { x: Var, index: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SmoothL1 { pred: Var, target: Var, beta: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations in execution order (which is a topological
/// order) so that [`Tape::backward`] can replay them in reverse.
#[derive(Debug, Default)]
pub struct Tape<T = f64> {
    nodes: Vec<Node<T>>,
}

/// Gradient of a scalar loss with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients<T = f64> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`; exactly zero when `var` has no path to the loss.
    pub fn get(&self, var: Var) -> Tensor<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn has_path(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose on the tape.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul_nt", self.value(a))?;
        let (n, k2) = matrix_dims("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn row_check(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let cols = self.value(x).cols();
        if self.value(row).len() != cols {
            return Err(Error::dim(op, self.shape(x), self.shape(row)));
        }
        Ok(cols)
    }

    /// Adds a length-`d` vector to every trailing-axis row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.row_check("add_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        if cols > 0 {
            for chunk in data.chunks_exact_mut(cols) {
                for (c, &b) in chunk.iter_mut().zip(&r) {
                    *c += b;
                }
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    /// Multiplies every trailing-axis row of `x` elementwise by a length-`d` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.row_check("mul_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        if cols > 0 {
            for chunk in data.chunks_exact_mut(cols) {
                for (c, &g) in chunk.iter_mut().zip(&r) {
                    *c = *c * g;
                }
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::from_parts(xv.shape().to_vec(), softmax_rows(xv.data(), xv.cols()));
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::from_parts(xv.shape().to_vec(), log_softmax_rows(xv.data(), xv.cols()));
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Non-affine layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x);
        let (data, inv_std) = layer_norm_rows(xv.data(), xv.cols(), eps);
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(value, Op::LayerNorm { x, inv_std }, rg))
    }

    /// Layer normalization followed by a per-feature gain and bias.
    pub fn layer_norm_affine(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let n = self.layer_norm(x, eps)?;
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transposed()?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Stacks 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, cols) = matrix_dims("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = matrix_dims("concat_rows", self.value(p))?;
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(*first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Joins 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (rows, _) = matrix_dims("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims("slice_cols", self.value(x))?;
        if start + len > cols {
            return Err(Error::Bounds {
                op: "slice_cols",
                index: start + len,
                len: cols,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, len], data),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Selects rows of a 2-D tensor in the given order; repeats are allowed.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = matrix_dims("gather_rows", self.value(x))?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::Bounds {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), cols], data),
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Average of the selected rows, as a `[1, d]` tensor.
    pub fn mean_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = matrix_dims("mean_rows", self.value(x))?;
        if index.is_empty() {
            return Err(Error::Contract("mean over an empty row selection".into()));
        }
        let src = self.value(x).data();
        let mut acc = vec![T::zero(); cols];
        for &i in index {
            if i >= rows {
                return Err(Error::Bounds {
                    op: "mean_rows",
                    index: i,
                    len: rows,
                });
            }
            for (a, &v) in acc.iter_mut().zip(&src[i * cols..(i + 1) * cols]) {
                *a += v;
            }
        }
        let inv = T::one() / T::lit(index.len() as f64);
        for a in acc.iter_mut() {
            *a = *a * inv;
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![1, cols], acc),
            Op::MeanRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Average of the token rows whose mask bit is set.
    pub fn mean_over(&mut self, x: Var, mask: &BinaryMask) -> Result<Var> {
        let rows = self.value(x).rows();
        if mask.len() != rows {
            return Err(Error::dim("mean_over", self.shape(x), &[mask.len()]));
        }
        self.mean_rows(x, &mask.masked_indices())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(xv.sum() / T::lit(xv.len() as f64));
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// Mean over all elements of the Huber-style smooth L1 penalty.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: T) -> Result<Var> {
        self.same_shape("smooth_l1", pred, target)?;
        if beta <= T::zero() {
            return Err(Error::Config("smooth_l1 beta must be positive".into()));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        if p.is_empty() {
            return Err(Error::Contract("smooth_l1 of empty tensors".into()));
        }
        let half = T::lit(0.5);
        let total: T = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| {
                let d = (a - b).abs();
                if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                }
            })
            .sum();
        let value = Tensor::scalar(total / T::lit(p.len() as f64));
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(value, Op::SmoothL1 { pred, target, beta }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), delta));
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt_into(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn_into(self.value(*a).data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a · bᵀ, a: m×k, b: n×k
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); n * k];
                    matmul_tn_into(gd, self.value(*a).data(), &mut db, m, n, k);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, gd.to_vec());
                if self.rg(*row) {
                    let cols = self.value(*row).len();
                    let mut dr = vec![T::zero(); cols];
                    if cols > 0 {
                        for chunk in gd.chunks_exact(cols) {
                            for (d, &v) in dr.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::MulRow(x, row) => {
                let rv = self.value(*row).data();
                let cols = rv.len();
                if cols == 0 {
                    return;
                }
                if self.rg(*x) {
                    let mut dx = gd.to_vec();
                    for chunk in dx.chunks_exact_mut(cols) {
                        for (d, &r) in chunk.iter_mut().zip(rv) {
                            *d = *d * r;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*row) {
                    let xv = self.value(*x).data();
                    let mut dr = vec![T::zero(); cols];
                    for (gc, xc) in gd.chunks_exact(cols).zip(xv.chunks_exact(cols)) {
                        for ((d, &gv), &xval) in dr.iter_mut().zip(gc).zip(xc) {
                            *d += gv * xval;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, gd.iter().map(|&v| v * *c).collect());
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    gd.iter().zip(xv).map(|(&g, &v)| g * gelu_grad(v)).collect(),
                );
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![T::zero(); y.len()];
                if cols > 0 {
                    for ((yc, gc), dc) in y
                        .chunks_exact(cols)
                        .zip(gd.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                    {
                        let dot: T = yc.iter().zip(gc).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dc.iter_mut().zip(yc).zip(gc) {
                            *d = yv * (gv - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![T::zero(); y.len()];
                if cols > 0 {
                    for ((yc, gc), dc) in y
                        .chunks_exact(cols)
                        .zip(gd.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                    {
                        let total: T = gc.iter().copied().sum();
                        for ((d, &yv), &gv) in dc.iter_mut().zip(yc).zip(gc) {
                            *d = gv - yv.exp() * total;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![T::zero(); y.len()];
                if cols > 0 {
                    let d = T::lit(cols as f64);
                    for (((yc, gc), dc), &inv) in y
                        .chunks_exact(cols)
                        .zip(gd.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                        .zip(inv_std)
                    {
                        let sum_g: T = gc.iter().copied().sum();
                        let sum_gy: T = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum();
                        for ((dv, &yv), &gv) in dc.iter_mut().zip(yc).zip(gc) {
                            *dv = inv / d * (d * gv - sum_g - yv * sum_gy);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Transpose(x) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                self.accumulate(grads, *x, transpose(gd, m, n));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gd.to_vec());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, gd[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.shape()[0];
                let cols = g.shape()[1];
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            dp.extend_from_slice(&gd[i * cols + start..i * cols + start + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let w = g.shape()[1];
                let mut dx = vec![T::zero(); rows * cols];
                for i in 0..rows {
                    dx[i * cols + start..i * cols + start + w]
                        .copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = vec![T::zero(); xv.len()];
                for (r, &i) in index.iter().enumerate() {
                    for (d, &v) in dx[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&gd[r * cols..(r + 1) * cols])
                    {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanRows { x, index } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let inv = T::one() / T::lit(index.len() as f64);
                let mut dx = vec![T::zero(); xv.len()];
                for &i in index {
                    for (d, &v) in dx[i * cols..(i + 1) * cols].iter_mut().zip(gd) {
                        *d += v * inv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = gd[0] / T::lit(n as f64);
                self.accumulate(grads, *x, vec![v; n]);
            }
            Op::SmoothL1 { pred, target, beta } => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let scale = gd[0] / T::lit(p.len() as f64);
                let dp: Vec<T> = p
                    .iter()
                    .zip(t)
                    .map(|(&a, &b)| {
                        let d = a - b;
                        let slope = if d.abs() < *beta { d / *beta } else { d.signum() };
                        slope * scale
                    })
                    .collect();
                if self.rg(*target) {
                    self.accumulate(grads, *target, dp.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *pred, dp);
            }
        }
    }
}
