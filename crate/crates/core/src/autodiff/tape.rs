//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the tape is a topological
//! order by construction and [`Tape::backward`] is a single reverse sweep.
//! Parameter leaves borrow their tensors; nothing is copied until a
//! gradient is produced.

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use super::TensorError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds accepted by [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Tanh,
    Sigmoid,
    RowSoftmax,
    MeanRows,
    Concat,
    Relu,
    MaxOverTime,
    L2Normalize,
    Scale(f64),
    Hinge,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    RowSoftmax(Var),
    MeanRows(Var),
    Sum(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    Unfold(Var, usize),
    MaxRows(Var, Vec<usize>),
    L2Normalize(Var, Vec<f64>),
    Gather(Var, Vec<(usize, usize)>),
}

enum Slot<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

struct Node<'a> {
    op: Op,
    value: Slot<'a>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    degenerate_normalizations: usize,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            degenerate_normalizations: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of zero rows seen by `l2_normalize` on this tape.
    pub fn degenerate_normalizations(&self) -> usize {
        self.degenerate_normalizations
    }

    pub fn value(&self, var: Var) -> &Tensor {
        match &self.nodes[var.0].value {
            Slot::Owned(t) => t,
            Slot::Borrowed(t) => t,
        }
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var).data()[0]
    }

    fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Slot::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_matrix(&self, var: Var) -> Result<&Tensor, TensorError> {
        let t = self.value(var);
        if t.is_matrix() {
            Ok(t)
        } else {
            Err(TensorError::NotMatrix(t.shape().to_vec()))
        }
    }

    /// Differentiable leaf borrowing `tensor`.
    pub fn param(&mut self, tensor: &'a Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Slot::Borrowed(tensor),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf owning `tensor`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(Op::Leaf, tensor, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(Op::Leaf, tensor, false)
    }

    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var, TensorError> {
        let unary = |inputs: &[Var]| -> Result<Var, TensorError> {
            match inputs {
                [a] => Ok(*a),
                _ => Err(TensorError::Arity {
                    expected: 1,
                    got: inputs.len(),
                }),
            }
        };
        let binary = |inputs: &[Var]| -> Result<(Var, Var), TensorError> {
            match inputs {
                [a, b] => Ok((*a, *b)),
                _ => Err(TensorError::Arity {
                    expected: 2,
                    got: inputs.len(),
                }),
            }
        };
        match kind {
            Primitive::MatMul => {
                let (a, b) = binary(inputs)?;
                self.matmul(a, b)
            }
            Primitive::Add => {
                let (a, b) = binary(inputs)?;
                self.add(a, b)
            }
            Primitive::Mul => {
                let (a, b) = binary(inputs)?;
                self.mul(a, b)
            }
            Primitive::Tanh => self.tanh(unary(inputs)?),
            Primitive::Sigmoid => self.sigmoid(unary(inputs)?),
            Primitive::RowSoftmax => self.row_softmax(unary(inputs)?),
            Primitive::MeanRows => self.mean_rows(unary(inputs)?),
            Primitive::Concat => self.concat(inputs),
            Primitive::Relu => self.relu(unary(inputs)?),
            Primitive::MaxOverTime => self.max_rows(unary(inputs)?),
            Primitive::L2Normalize => self.l2_normalize(unary(inputs)?),
            Primitive::Scale(s) => self.scale(unary(inputs)?, s),
            Primitive::Hinge => self.hinge(unary(inputs)?),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.check_matrix(a)?, self.check_matrix(b)?);
        if ta.cols() != tb.rows() {
            return Err(TensorError::shape("matmul", ta, tb));
        }
        let out = matmul(ta, tb);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.check_matrix(a)?, self.check_matrix(b)?);
        if ta.cols() != tb.cols() {
            return Err(TensorError::shape("matmul_nt", ta, tb));
        }
        let out = matmul_nt(ta, tb);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::MatMulNt(a, b), out, rg))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool), TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(TensorError::shape(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok((out, self.requires_grad(a) || self.requires_grad(b)))
    }

    /// Elementwise sum. A `1 x c` right operand is broadcast over the rows
    /// of an `r x c` left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) && tb.rows() == 1 && ta.cols() == tb.cols() && ta.is_matrix() {
            let c = ta.cols();
            let mut data = ta.data().to_vec();
            for (i, v) in data.iter_mut().enumerate() {
                *v += tb.data()[i % c];
            }
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            let rg = self.requires_grad(a) || self.requires_grad(b);
            return Ok(self.push(Op::AddRow(a, b), out, rg));
        }
        let (out, rg) = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (out, rg) = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (out, rg) = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| v * s);
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Scale(a, s), out, rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| v + s);
        let rg = self.requires_grad(a);
        Ok(self.push(Op::AddScalar(a), out, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(f64::tanh);
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Tanh(a), out, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(sigmoid);
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Sigmoid(a), out, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Relu(a), out, rg))
    }

    /// `max(0, x)`; same derivative convention as relu (zero at the kink).
    pub fn hinge(&mut self, a: Var) -> Result<Var, TensorError> {
        self.relu(a)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.check_matrix(a)?;
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::RowSoftmax(a), out, rg))
    }

    /// Arithmetic mean of the rows, summed top to bottom.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = mean_rows(self.check_matrix(a)?);
        let rg = self.requires_grad(a);
        Ok(self.push(Op::MeanRows(a), out, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let total = self.value(a).sum();
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Sum(a), Tensor::filled(1, 1, total), rg))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyInput("concat"))?;
        let rows = self.check_matrix(first)?.rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.check_matrix(p)?;
            if t.rows() != rows {
                return Err(TensorError::shape("concat", self.value(first), t));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Op::Concat(parts.to_vec()), out, rg))
    }

    /// Vertical stacking of matrices with equal column counts.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyInput("stack_rows"))?;
        let cols = self.check_matrix(first)?.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.check_matrix(p)?;
            if t.cols() != cols {
                return Err(TensorError::shape("stack_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Op::StackRows(parts.to_vec()), out, rg))
    }

    pub fn row(&mut self, a: Var, index: usize) -> Result<Var, TensorError> {
        let t = self.check_matrix(a)?;
        if index >= t.rows() {
            return Err(TensorError::Index {
                index,
                len: t.rows(),
            });
        }
        let out = Tensor::row_vector(t.row(index).to_vec())?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Row(a, index), out, rg))
    }

    /// Sliding windows of `width` consecutive rows, each flattened into one
    /// output row: `n x c` becomes `(n - width + 1) x (width * c)`.
    pub fn unfold(&mut self, a: Var, width: usize) -> Result<Var, TensorError> {
        let t = self.check_matrix(a)?;
        let (n, c) = (t.rows(), t.cols());
        if width == 0 || width > n {
            return Err(TensorError::Window { width, len: n });
        }
        let windows = n - width + 1;
        let mut data = Vec::with_capacity(windows * width * c);
        for start in 0..windows {
            data.extend_from_slice(&t.data()[start * c..(start + width) * c]);
        }
        let out = Tensor::matrix(windows, width * c, data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Unfold(a, width), out, rg))
    }

    /// Column-wise maximum over rows (max-over-time pooling). Ties resolve
    /// to the earliest row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.check_matrix(a)?;
        let c = t.cols();
        let mut best = t.row(0).to_vec();
        let mut argmax = vec![0usize; c];
        for r in 1..t.rows() {
            for (j, &v) in t.row(r).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = r;
                }
            }
        }
        let out = Tensor::row_vector(best)?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::MaxRows(a, argmax), out, rg))
    }

    /// Row-wise L2 normalization. A zero row maps to a zero row and is
    /// counted as degenerate.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.check_matrix(a)?;
        let (c, shape) = (t.cols(), t.shape().to_vec());
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        let mut degenerate = 0;
        for row in data.chunks_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            } else {
                degenerate += 1;
            }
            norms.push(norm);
        }
        if degenerate > 0 {
            log::warn!("l2_normalize: {degenerate} zero row(s) left unnormalized");
            self.degenerate_normalizations += degenerate;
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::L2Normalize(a, norms), out, rg))
    }

    /// Picks individual entries into a `1 x len` row.
    pub fn gather(&mut self, a: Var, at: Vec<(usize, usize)>) -> Result<Var, TensorError> {
        let t = self.check_matrix(a)?;
        if at.is_empty() {
            return Err(TensorError::EmptyInput("gather"));
        }
        let mut data = Vec::with_capacity(at.len());
        for &(r, c) in &at {
            if r >= t.rows() || c >= t.cols() {
                return Err(TensorError::Index {
                    index: r.max(c),
                    len: t.rows().min(t.cols()),
                });
            }
            data.push(t.get(r, c));
        }
        let out = Tensor::row_vector(data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Gather(a, at), out, rg))
    }

    /// Gradients of a scalar root with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let shape = self.value(root).shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarRoot(shape.to_vec()));
        }
        let seed = Tensor::new(shape.to_vec(), vec![1.0])?;
        self.backward_with(root, seed)
    }

    /// Backward sweep seeded with an upstream gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients, TensorError> {
        if !seed.same_shape(self.value(root)) {
            return Err(TensorError::shape("backward seed", &seed, self.value(root)));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, Var(i), &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.requires_grad(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = self.value(out);
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, matmul(g, self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, matmul_tn(g, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let c = g.cols();
                    let mut acc = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (s, v) in acc.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *b, tensor_like(self.value(*b), acc));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, zip(g, tb, |u, v| u * v));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, zip(g, ta, |u, v| u * v));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => self.accumulate(grads, *a, zip(g, y, |u, t| u * (1.0 - t * t))),
            Op::Sigmoid(a) => self.accumulate(grads, *a, zip(g, y, |u, s| u * s * (1.0 - s))),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, zip(g, x, |u, v| if v > 0.0 { u } else { 0.0 }));
            }
            Op::RowSoftmax(a) => {
                let c = y.cols();
                let mut data = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    data.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                self.accumulate(grads, *a, tensor_like(y, data));
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let n = x.rows() as f64;
                let row: Vec<f64> = g.data().iter().map(|v| v / n).collect();
                let data = row.iter().copied().cycle().take(x.len()).collect();
                self.accumulate(grads, *a, tensor_like(x, data));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                let data = vec![g.data()[0]; x.len()];
                self.accumulate(grads, *a, tensor_like(x, data));
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        self.accumulate(grads, p, tensor_like(self.value(p), data));
                    }
                    offset += pc;
                }
            }
            Op::StackRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.requires_grad(p) {
                        let data = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, p, tensor_like(self.value(p), data));
                    }
                    offset += len;
                }
                debug_assert_eq!(offset % c, 0);
            }
            Op::Row(a, index) => {
                let x = self.value(*a);
                let mut gx = Tensor::zeros_like(x);
                let c = x.cols();
                gx.data_mut()[index * c..(index + 1) * c].copy_from_slice(g.data());
                self.accumulate(grads, *a, gx);
            }
            Op::Unfold(a, width) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut gx = Tensor::zeros_like(x);
                let span = width * c;
                for (start, gr) in g.data().chunks(span).enumerate() {
                    let target = &mut gx.data_mut()[start * c..start * c + span];
                    for (t, v) in target.iter_mut().zip(gr) {
                        *t += v;
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::MaxRows(a, argmax) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut gx = Tensor::zeros_like(x);
                for (j, &r) in argmax.iter().enumerate() {
                    gx.data_mut()[r * c + j] = g.data()[j];
                }
                self.accumulate(grads, *a, gx);
            }
            Op::L2Normalize(a, norms) => {
                let c = y.cols();
                let mut data = Vec::with_capacity(y.len());
                for ((yr, gr), &norm) in y.data().chunks(c).zip(g.data().chunks(c)).zip(norms) {
                    if norm > 0.0 {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        data.extend(yr.iter().zip(gr).map(|(p, q)| (q - p * dot) / norm));
                    } else {
                        data.extend(std::iter::repeat_n(0.0, c));
                    }
                }
                self.accumulate(grads, *a, tensor_like(y, data));
            }
            Op::Gather(a, at) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut gx = Tensor::zeros_like(x);
                for (&(r, col), v) in at.iter().zip(g.data()) {
                    gx.data_mut()[r * c + col] += v;
                }
                self.accumulate(grads, *a, gx);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn mean_rows(t: &Tensor) -> Tensor {
    let (n, c) = (t.rows(), t.cols());
    let mut acc = vec![0.0; c];
    for row in t.data().chunks(c) {
        for (s, v) in acc.iter_mut().zip(row) {
            *s += v;
        }
    }
    for s in &mut acc {
        *s /= n as f64;
    }
    Tensor::matrix(1, c, acc).expect("mean of a matrix is a row")
}

fn tensor_like(shape_of: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(shape_of.shape().to_vec(), data).expect("gradient matches value shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    tensor_like(a, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_is_noop() {
        let x = m(3, 2, &[1.0, -2.0, 3.5, 0.25, 9.0, -7.0]);
        let i3 = Tensor::identity(3);
        let mut tape = Tape::new();
        let a = tape.constant(i3);
        let b = tape.constant(x.clone());
        let y = tape.apply(Primitive::MatMul, &[a, b]).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(m(1, 2, &[0.0, 0.0]));
        let s = tape.row_softmax(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn tanh_slope_at_zero_matches_central_difference() {
        let x = m(1, 1, &[0.0]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let y = tape.tanh(v).unwrap();
        let g = tape.backward(y).unwrap();
        let analytic = g.get(v).unwrap().data()[0];
        let h: f64 = 1e-6;
        let numeric = (h.tanh() - (-h).tanh()) / (2.0 * h);
        assert!((analytic - 1.0).abs() < 1e-12);
        assert!((analytic - numeric).abs() < 1e-9);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let x = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let s = tape.sum(v).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(v).unwrap().data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn dot_gradient_is_other_operand() {
        let x = m(1, 3, &[1.0, 2.0, 3.0]);
        let y = m(1, 3, &[-4.0, 0.5, 2.0]);
        let mut tape = Tape::new();
        let (vx, vy) = (tape.param(&x), tape.param(&y));
        let d = tape.matmul_nt(vx, vy).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.get(vx).unwrap(), &y);
        assert_eq!(g.get(vy).unwrap(), &x);
    }

    #[test]
    fn fan_out_accumulates() {
        let x = m(1, 2, &[3.0, -1.0]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let x = m(1, 2, &[1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        assert!(matches!(
            tape.backward(v),
            Err(TensorError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(m(2, 3, &[0.0; 6]));
        let b = tape.constant(m(2, 3, &[0.0; 6]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { .. })));
        let c = tape.constant(m(3, 2, &[0.0; 6]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn zero_vector_normalizes_to_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(m(2, 2, &[0.0, 0.0, 3.0, 4.0]));
        let n = tape.l2_normalize(a).unwrap();
        assert_eq!(tape.value(n).data(), &[0.0, 0.0, 0.6, 0.8]);
        assert_eq!(tape.degenerate_normalizations(), 1);
        let s = tape.sum(n).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(&g.get(a).unwrap().data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn unfold_windows_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let u = tape.unfold(a, 2).unwrap();
        assert_eq!(tape.value(u).shape(), &[2, 4]);
        assert_eq!(tape.value(u).data(), &[1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(tape.unfold(a, 4).is_err());
    }

    #[test]
    fn max_rows_ties_pick_first_row() {
        let mut tape = Tape::new();
        let a = tape.leaf(m(2, 2, &[1.0, 5.0, 1.0, 2.0]));
        let mx = tape.max_rows(a).unwrap();
        let s = tape.sum(mx).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn apply_checks_arity() {
        let mut tape = Tape::new();
        let a = tape.constant(m(1, 1, &[1.0]));
        assert!(matches!(
            tape.apply(Primitive::MatMul, &[a]),
            Err(TensorError::Arity { .. })
        ));
    }
}
