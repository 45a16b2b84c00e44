//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded on a [`Tape`] in execution order, so node ids are
//! already a topological order and the backward pass is a single reverse
//! sweep. [`Var`] is a cheap copyable handle into one tape.
//!
//! Broadcasting is limited to bias-add over the last axis and scalar scaling.

use std::cell::RefCell;

use thiserror::Error;

use crate::tensor::{axis_blocks, lit, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; clear_grads() before running it again")]
    BackwardTwice,
}

type Id = usize;

enum Op<T> {
    Leaf,
    MatMul { a: Id, b: Id, m: usize, k: usize, n: usize },
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    AddBias { a: Id, bias: Id },
    Scale { a: Id, factor: T },
    AddScalar(Id),
    Relu(Id),
    Exp(Id),
    Log(Id),
    Sqrt(Id),
    Square(Id),
    Abs(Id),
    Clamp { a: Id, lo: T, hi: T },
    SumAll(Id),
    MeanAll(Id),
    SumAxis { a: Id, axis: usize },
    MeanAxis { a: Id, axis: usize },
    L2NormAxis { a: Id, axis: usize },
    Concat { inputs: Vec<Id>, axis: usize },
    Transpose { a: Id, rows: usize, cols: usize },
    Reshape(Id),
    Narrow { a: Id, axis: usize, start: usize },
    Softmax(Id),
    LayerNorm { a: Id, gain: Id, bias: Id, xhat: Vec<T>, inv_std: Vec<T> },
    Linear { a: Id, weight: Id, bias: Id, rows: usize, inp: usize, out: usize },
    TopKMean { a: Id, selected: Vec<usize> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations. Not `Sync`: one tape belongs to one
/// computation at a time.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Option<Vec<Option<Vec<T>>>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: Id,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf(t, true)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf(t, false)
    }

    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let shape = t.shape().to_vec();
        self.push_raw(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    fn push_raw(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Id]) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_raw(shape, value, op, requires_grad)
    }

    /// Drops gradients from a previous backward pass so another may run.
    pub fn clear_grads(&self) {
        *self.grads.borrow_mut() = None;
    }

    /// Reverse sweep from a scalar `loss`, populating gradients for every
    /// node that requires them.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<(), TensorError> {
        assert!(std::ptr::eq(self, loss.tape), "loss belongs to a different tape");
        if self.grads.borrow().is_some() {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 || !root.shape.is_empty() && root.shape.iter().any(|&d| d != 1) {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            backprop(&nodes, node, g, lower);
        }
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    fn check_same(&self, other: &Var<'_, T>) {
        assert!(std::ptr::eq(self, other.tape), "vars from different tapes");
    }
}

/// Lazily allocated accumulation slot for an input's gradient.
fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], id: Id) -> Option<&'a mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let narrow = n < NARROW && k >= NARROW;
            if let Some(da) = slot(grads, nodes, *a) {
                if narrow {
                    let bt = transposed(bv, k, n);
                    for i in 0..m {
                        let darow = &mut da[i * k..(i + 1) * k];
                        for j in 0..n {
                            axpy(g[i * n + j], &bt[j * k..(j + 1) * k], darow);
                        }
                    }
                } else {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += dot(grow, brow);
                        }
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                if narrow {
                    let mut dbt = vec![T::zero(); n * k];
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            axpy(g[i * n + j], arow, &mut dbt[j * k..(j + 1) * k]);
                        }
                    }
                    for p in 0..k {
                        for j in 0..n {
                            db[p * n + j] += dbt[j * k + p];
                        }
                    }
                } else {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(av[i * k + p], grow, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                axpy(T::one(), g, da);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                axpy(T::one(), g, db);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                axpy(T::one(), g, da);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                axpy(-T::one(), g, db);
            }
        }
        Op::Mul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
        }
        Op::AddBias { a, bias } => {
            if let Some(da) = slot(grads, nodes, *a) {
                axpy(T::one(), g, da);
            }
            let width = nodes[*bias].value.len();
            if let Some(db) = slot(grads, nodes, *bias) {
                for row in g.chunks_exact(width) {
                    axpy(T::one(), row, db);
                }
            }
        }
        Op::Scale { a, factor } => {
            if let Some(da) = slot(grads, nodes, *a) {
                axpy(*factor, g, da);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                axpy(T::one(), g, da);
            }
        }
        Op::Relu(a) => {
            let av = &nodes[*a].value;
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, &gi), &x) in da.iter_mut().zip(g).zip(av) {
                    if x > T::zero() {
                        *d += gi;
                    }
                }
            }
        }
        Op::Exp(a) => {
            let y = &node.value;
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, &gi), &yi) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * yi;
                }
            }
        }
        Op::Log(a) => {
            let av = &nodes[*a].value;
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, &gi), &x) in da.iter_mut().zip(g).zip(av) {
                    *d += gi / x;
                }
            }
        }
        Op::Sqrt(a) => {
            let y = &node.value;
            let half = lit::<T>(0.5);
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, &gi), &yi) in da.iter_mut().zip(g).zip(y) {
                    // subgradient 0 at the origin
                    if yi > T::zero() {
                        *d += gi * half / yi;
                    }
                }
            }
        }
        Op::Square(a) => {
            let av = &nodes[*a].value;
            let two = lit::<T>(2.0);
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, &gi), &x) in da.iter_mut().zip(g).zip(av) {
                    *d += two * x * gi;
                }
            }
        }
        Op::Abs(a) => {
            let av = &nodes[*a].value;
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, &gi), &x) in da.iter_mut().zip(g).zip(av) {
                    if x > T::zero() {
                        *d += gi;
                    } else if x < T::zero() {
                        *d -= gi;
                    }
                }
            }
        }
        Op::Clamp { a, lo, hi } => {
            let av = &nodes[*a].value;
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, &gi), &x) in da.iter_mut().zip(g).zip(av) {
                    if x >= *lo && x <= *hi {
                        *d += gi;
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                let g0 = g[0];
                da.iter_mut().for_each(|d| *d += g0);
            }
        }
        Op::MeanAll(a) => {
            let n = nodes[*a].value.len();
            if let Some(da) = slot(grads, nodes, *a) {
                let g0 = g[0] / lit::<T>(n as f64);
                da.iter_mut().for_each(|d| *d += g0);
            }
        }
        Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
            let (outer, len, inner) = axis_blocks(&nodes[*a].shape, *axis);
            let factor = if matches!(node.op, Op::MeanAxis { .. }) {
                T::one() / lit::<T>(len as f64)
            } else {
                T::one()
            };
            if let Some(da) = slot(grads, nodes, *a) {
                for o in 0..outer {
                    let grow = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        axpy(factor, grow, &mut da[base..base + inner]);
                    }
                }
            }
        }
        Op::L2NormAxis { a, axis } => {
            let (outer, len, inner) = axis_blocks(&nodes[*a].shape, *axis);
            let av = &nodes[*a].value;
            let y = &node.value;
            if let Some(da) = slot(grads, nodes, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let norm = y[o * inner + i];
                        if norm <= T::zero() {
                            continue;
                        }
                        let scale = g[o * inner + i] / norm;
                        for l in 0..len {
                            let idx = (o * len + l) * inner + i;
                            da[idx] += scale * av[idx];
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_blocks(&node.shape, *axis);
            let mut offset = 0;
            for &inp in inputs {
                let len = nodes[inp].shape[*axis];
                if let Some(da) = slot(grads, nodes, inp) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        axpy(T::one(), &g[src..src + len * inner], &mut da[dst..dst + len * inner]);
                    }
                }
                offset += len;
            }
        }
        Op::Transpose { a, rows, cols } => {
            if let Some(da) = slot(grads, nodes, *a) {
                for r in 0..*rows {
                    for c in 0..*cols {
                        da[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        Op::Narrow { a, axis, start } => {
            let (outer, full, inner) = axis_blocks(&nodes[*a].shape, *axis);
            let len = node.shape[*axis];
            if let Some(da) = slot(grads, nodes, *a) {
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    axpy(T::one(), &g[src..src + len * inner], &mut da[dst..dst + len * inner]);
                }
            }
        }
        Op::Softmax(a) => {
            let width = *node.shape.last().unwrap_or(&1);
            let y = &node.value;
            if let Some(da) = slot(grads, nodes, *a) {
                for ((drow, grow), yrow) in da
                    .chunks_exact_mut(width)
                    .zip(g.chunks_exact(width))
                    .zip(y.chunks_exact(width))
                {
                    let inner = dot(grow, yrow);
                    for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yi * (gi - inner);
                    }
                }
            }
        }
        Op::LayerNorm {
            a,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let width = nodes[*gain].value.len();
            let gv = &nodes[*gain].value;
            let n = lit::<T>(width as f64);
            if let Some(da) = slot(grads, nodes, *a) {
                let mut dxhat = vec![T::zero(); width];
                for (r, (drow, grow)) in da.chunks_exact_mut(width).zip(g.chunks_exact(width)).enumerate() {
                    let xrow = &xhat[r * width..(r + 1) * width];
                    for j in 0..width {
                        dxhat[j] = grow[j] * gv[j];
                    }
                    let sum_d: T = dxhat.iter().copied().sum();
                    let sum_dx = dot(&dxhat, xrow);
                    let s = inv_std[r] / n;
                    for j in 0..width {
                        drow[j] += s * (n * dxhat[j] - sum_d - xrow[j] * sum_dx);
                    }
                }
            }
            if let Some(dg) = slot(grads, nodes, *gain) {
                for (grow, xrow) in g.chunks_exact(width).zip(xhat.chunks_exact(width)) {
                    for j in 0..width {
                        dg[j] += grow[j] * xrow[j];
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *bias) {
                for grow in g.chunks_exact(width) {
                    axpy(T::one(), grow, db);
                }
            }
        }
        Op::Linear {
            a,
            weight,
            bias,
            rows,
            inp,
            out,
        } => {
            let (rows, inp, out) = (*rows, *inp, *out);
            let av = &nodes[*a].value;
            let wv = &nodes[*weight].value;
            if let Some(da) = slot(grads, nodes, *a) {
                for r in 0..rows {
                    let grow = &g[r * out..(r + 1) * out];
                    for p in 0..inp {
                        da[r * inp + p] += dot(grow, &wv[p * out..(p + 1) * out]);
                    }
                }
            }
            if let Some(dw) = slot(grads, nodes, *weight) {
                for r in 0..rows {
                    let grow = &g[r * out..(r + 1) * out];
                    for p in 0..inp {
                        axpy(av[r * inp + p], grow, &mut dw[p * out..(p + 1) * out]);
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *bias) {
                for grow in g.chunks_exact(out) {
                    axpy(T::one(), grow, db);
                }
            }
        }
        Op::TopKMean { a, selected } => {
            if let Some(da) = slot(grads, nodes, *a) {
                let share = g[0] / lit::<T>(selected.len() as f64);
                for &i in selected {
                    da[i] += share;
                }
            }
        }
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        acc += x * y;
    }
    lanes.iter().fold(acc, |s, &v| s + v)
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Output widths below this use a transposed right operand so inner loops
/// run over the long axis.
const NARROW: usize = 16;

fn transposed<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    if n < NARROW && k >= NARROW {
        let bt = transposed(b, k, n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] += dot(arow, &bt[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], orow);
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor<T> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        Tensor::new(&node.shape, node.value.clone()).expect("recorded node is well formed")
    }

    /// Value of a one-element node.
    pub fn item(&self) -> T {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "item() on non-scalar");
        v[0]
    }

    /// Gradient from the last backward pass; `None` before backward or when
    /// the node was not reached.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let grads = self.tape.grads.borrow();
        let g = grads.as_ref()?.get(self.id)?.as_ref()?;
        let shape = self.shape();
        Some(Tensor::new(&shape, g.clone()).expect("gradient matches value shape"))
    }

    pub fn backward(self) -> Result<(), TensorError> {
        self.tape.backward(self)
    }

    fn with_value<R>(&self, f: impl FnOnce(&[usize], &[T]) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        f(&node.shape, &node.value)
    }

    fn unary(self, op: Op<T>, value: Vec<T>) -> Var<'t, T> {
        let shape = self.shape();
        self.tape.push(shape, value, op, &[self.id])
    }

    fn map_values(&self, f: impl Fn(T) -> T) -> Vec<T> {
        self.with_value(|_, v| v.iter().map(|&x| f(x)).collect())
    }

    fn same_shape(self, other: Var<'t, T>, op: &'static str) -> Result<(), TensorError> {
        self.tape.check_same(&other);
        let (l, r) = (self.shape(), other.shape());
        if l != r {
            return Err(TensorError::ShapeMismatch { op, left: l, right: r });
        }
        Ok(())
    }

    fn zip_values(self, other: Var<'t, T>, f: impl Fn(T, T) -> T) -> Vec<T> {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id]
            .value
            .iter()
            .zip(&nodes[other.id].value)
            .map(|(&a, &b)| f(a, b))
            .collect()
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.tape.check_same(&other);
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ls,
                right: rs,
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let mut out = vec![T::zero(); m * n];
        {
            let nodes = self.tape.nodes.borrow();
            matmul_acc(&nodes[self.id].value, &nodes[other.id].value, m, k, n, &mut out);
        }
        Ok(self.tape.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            &[self.id, other.id],
        ))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_shape(other, "add")?;
        let v = self.zip_values(other, |a, b| a + b);
        Ok(self.tape.push(self.shape(), v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_shape(other, "sub")?;
        let v = self.zip_values(other, |a, b| a - b);
        Ok(self.tape.push(self.shape(), v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_shape(other, "mul")?;
        let v = self.zip_values(other, |a, b| a * b);
        Ok(self.tape.push(self.shape(), v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.tape.check_same(&bias);
        let (s, bs) = (self.shape(), bias.shape());
        if bs.len() != 1 || s.last() != bs.first() {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: s,
                right: bs,
            });
        }
        let width = bs[0];
        let v = {
            let nodes = self.tape.nodes.borrow();
            let b = &nodes[bias.id].value;
            let mut v = nodes[self.id].value.clone();
            for row in v.chunks_exact_mut(width) {
                axpy(T::one(), b, row);
            }
            v
        };
        Ok(self.tape.push(s, v, Op::AddBias { a: self.id, bias: bias.id }, &[self.id, bias.id]))
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let v = self.map_values(|x| x * factor);
        self.unary(Op::Scale { a: self.id, factor }, v)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let v = self.map_values(|x| x + c);
        self.unary(Op::AddScalar(self.id), v)
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.map_values(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(Op::Relu(self.id), v)
    }

    pub fn exp(self) -> Result<Var<'t, T>, TensorError> {
        let v = self.map_values(T::exp);
        if let Some(x) = v.iter().find(|x| !x.is_finite()) {
            return Err(TensorError::Domain {
                op: "exp",
                detail: format!("result {x} is not finite"),
            });
        }
        Ok(self.unary(Op::Exp(self.id), v))
    }

    pub fn log(self) -> Result<Var<'t, T>, TensorError> {
        if let Some(x) = self.with_value(|_, v| v.iter().copied().find(|&x| !(x > T::zero()))) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("argument {x} is not strictly positive"),
            });
        }
        let v = self.map_values(T::ln);
        Ok(self.unary(Op::Log(self.id), v))
    }

    pub fn sqrt(self) -> Result<Var<'t, T>, TensorError> {
        if let Some(x) = self.with_value(|_, v| v.iter().copied().find(|&x| !(x >= T::zero()))) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("argument {x} is negative"),
            });
        }
        let v = self.map_values(T::sqrt);
        Ok(self.unary(Op::Sqrt(self.id), v))
    }

    pub fn square(self) -> Var<'t, T> {
        let v = self.map_values(|x| x * x);
        self.unary(Op::Square(self.id), v)
    }

    pub fn abs(self) -> Var<'t, T> {
        let v = self.map_values(T::abs);
        self.unary(Op::Abs(self.id), v)
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        let v = self.map_values(|x| x.max(lo).min(hi));
        self.unary(Op::Clamp { a: self.id, lo, hi }, v)
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let s = self.with_value(|_, v| v.iter().copied().sum());
        self.tape.push(Vec::new(), vec![s], Op::SumAll(self.id), &[self.id])
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let s = self.with_value(|_, v| v.iter().copied().sum::<T>() / lit::<T>(v.len() as f64));
        self.tape.push(Vec::new(), vec![s], Op::MeanAll(self.id), &[self.id])
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<Vec<usize>, TensorError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op,
                detail: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        Ok(shape)
    }

    fn reduce_axis(self, axis: usize, op: &'static str, f: impl Fn(&[T], usize, usize) -> T) -> Result<(Vec<usize>, Vec<T>), TensorError> {
        let shape = self.check_axis(axis, op)?;
        let (outer, len, inner) = axis_blocks(&shape, axis);
        let v = self.with_value(|_, v| {
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    out.push(f(&v[o * len * inner + i..], len, inner));
                }
            }
            out
        });
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok((out_shape, v))
    }

    /// Sums out `axis`; the result has that axis removed.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let (shape, v) = self.reduce_axis(axis, "sum_axis", |v, len, stride| (0..len).map(|l| v[l * stride]).sum())?;
        Ok(self.tape.push(shape, v, Op::SumAxis { a: self.id, axis }, &[self.id]))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let (shape, v) = self.reduce_axis(axis, "mean_axis", |v, len, stride| {
            (0..len).map(|l| v[l * stride]).sum::<T>() / lit::<T>(len as f64)
        })?;
        Ok(self.tape.push(shape, v, Op::MeanAxis { a: self.id, axis }, &[self.id]))
    }

    /// Euclidean norm along `axis`.
    pub fn l2_norm_axis(self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let (shape, v) = self.reduce_axis(axis, "l2_norm_axis", |v, len, stride| {
            (0..len).map(|l| v[l * stride] * v[l * stride]).sum::<T>().sqrt()
        })?;
        Ok(self.tape.push(shape, v, Op::L2NormAxis { a: self.id, axis }, &[self.id]))
    }

    /// 2-D transpose.
    pub fn transpose(self) -> Result<Var<'t, T>, TensorError> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                detail: format!("expected a matrix, got shape {shape:?}"),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let v = self.with_value(|_, v| {
            let mut out = vec![T::zero(); v.len()];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = v[r * cols + c];
                }
            }
            out
        });
        Ok(self.tape.push(vec![cols, rows], v, Op::Transpose { a: self.id, rows, cols }, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let old = self.shape();
        if shape.iter().product::<usize>() != old.iter().product::<usize>() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: old,
                right: shape.to_vec(),
            });
        }
        let v = self.with_value(|_, v| v.to_vec());
        Ok(self.tape.push(shape.to_vec(), v, Op::Reshape(self.id), &[self.id]))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>, TensorError> {
        let shape = self.check_axis(axis, "narrow")?;
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                detail: format!("range {start}..{} outside axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, full, inner) = axis_blocks(&shape, axis);
        let v = self.with_value(|_, v| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&v[base..base + len * inner]);
            }
            out
        });
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.tape.push(out_shape, v, Op::Narrow { a: self.id, axis, start }, &[self.id]))
    }

    /// Normalized exponentials along the last axis, with the row maximum
    /// subtracted first.
    pub fn softmax_rows(self) -> Result<Var<'t, T>, TensorError> {
        let shape = self.shape();
        let width = *shape.last().ok_or(TensorError::InvalidArgument {
            op: "softmax_rows",
            detail: "scalar input".into(),
        })?;
        let v = self.with_value(|_, v| {
            let mut out = v.to_vec();
            for row in out.chunks_exact_mut(width) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in row.iter_mut() {
                    *x /= total;
                }
            }
            out
        });
        if v.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::Domain {
                op: "softmax_rows",
                detail: "non-finite input".into(),
            });
        }
        Ok(self.unary(Op::Softmax(self.id), v))
    }

    /// Normalizes over the last axis (epsilon 1e-5) then applies `gain` and
    /// `bias`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.tape.check_same(&gain);
        self.tape.check_same(&bias);
        let shape = self.shape();
        let (gs, bs) = (gain.shape(), bias.shape());
        if gs.len() != 1 || shape.last() != gs.first() {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: gs,
            });
        }
        if bs != gs {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: gs,
                right: bs,
            });
        }
        let width = gs[0];
        let eps = lit::<T>(1e-5);
        let n = lit::<T>(width as f64);
        let (out, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let gv = &nodes[gain.id].value;
            let bv = &nodes[bias.id].value;
            let rows = x.len() / width;
            let mut out = vec![T::zero(); x.len()];
            let mut xhat = vec![T::zero(); x.len()];
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &x[r * width..(r + 1) * width];
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let inv = T::one() / (var + eps).sqrt();
                inv_std.push(inv);
                for j in 0..width {
                    let h = (row[j] - mean) * inv;
                    xhat[r * width + j] = h;
                    out[r * width + j] = h * gv[j] + bv[j];
                }
            }
            (out, xhat, inv_std)
        };
        Ok(self.tape.push(
            shape,
            out,
            Op::LayerNorm {
                a: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Per-row affine map over the last axis: `x · weight + bias`.
    pub fn linear(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.tape.check_same(&weight);
        self.tape.check_same(&bias);
        let shape = self.shape();
        let ws = weight.shape();
        let bs = bias.shape();
        if ws.len() != 2 || shape.last() != ws.first() {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: shape,
                right: ws,
            });
        }
        if bs.len() != 1 || bs[0] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: ws,
                right: bs,
            });
        }
        let (inp, out) = (ws[0], ws[1]);
        let rows = self.numel() / inp;
        let v = {
            let nodes = self.tape.nodes.borrow();
            let b = &nodes[bias.id].value;
            let mut v = Vec::with_capacity(rows * out);
            for _ in 0..rows {
                v.extend_from_slice(b);
            }
            matmul_acc(&nodes[self.id].value, &nodes[weight.id].value, rows, inp, out, &mut v);
            v
        };
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = out;
        Ok(self.tape.push(
            out_shape,
            v,
            Op::Linear {
                a: self.id,
                weight: weight.id,
                bias: bias.id,
                rows,
                inp,
                out,
            },
            &[self.id, weight.id, bias.id],
        ))
    }

    /// Mean of the `k` largest entries of a 1-D tensor. Ties go to the
    /// lower index.
    pub fn topk_mean(self, k: usize) -> Result<Var<'t, T>, TensorError> {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "topk_mean",
                detail: format!("expected a vector, got shape {shape:?}"),
            });
        }
        let n = shape[0];
        if k == 0 || k > n {
            return Err(TensorError::InvalidArgument {
                op: "topk_mean",
                detail: format!("k = {k} outside 1..={n}"),
            });
        }
        let (selected, mean) = self.with_value(|_, v| {
            let mut order: Vec<usize> = (0..n).collect();
            // stable sort keeps lower indices first among equal values
            order.sort_by(|&i, &j| v[j].partial_cmp(&v[i]).unwrap_or(std::cmp::Ordering::Equal));
            order.truncate(k);
            let mean = order.iter().map(|&i| v[i]).sum::<T>() / lit::<T>(k as f64);
            (order, mean)
        });
        Ok(self.tape.push(Vec::new(), vec![mean], Op::TopKMean { a: self.id, selected }, &[self.id]))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>, TensorError> {
    let first = parts.first().ok_or(TensorError::InvalidArgument {
        op: "concat",
        detail: "no inputs".into(),
    })?;
    let tape = first.tape;
    let base = first.check_axis(axis, "concat")?;
    let mut total = 0;
    for p in parts {
        tape.check_same(p);
        let s = p.shape();
        let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                left: base,
                right: s,
            });
        }
        total += s[axis];
    }
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let (outer, _, inner) = axis_blocks(&out_shape, axis);
    let v = {
        let nodes = tape.nodes.borrow();
        let mut v = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = nodes[p.id].shape[axis] * inner;
                v.extend_from_slice(&nodes[p.id].value[o * len..(o + 1) * len]);
            }
        }
        v
    };
    let ids: Vec<Id> = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(out_shape, v, Op::Concat { inputs: ids.clone(), axis }, &ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::eye(2));
        let b = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let q = tape.constant(t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        assert_eq!(p.matmul(q).unwrap().value().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_mismatch_reports_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match a.matmul(b) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected mismatch, got {:?}", other.map(|v| v.shape())),
        }
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3, 2], &[0.0, 0.0, 1000.0, 1000.0, 0.0, 3f64.ln()]));
        let y = x.softmax_rows().unwrap().value();
        let d = y.data();
        assert_eq!(&d[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!((d[4] - 0.25).abs() < 1e-12 && (d[5] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t64(&[2, 2], &[7.0, 7.0, 1.0, 3.0]));
        let y = x.layer_norm(g, b).unwrap().value();
        assert_eq!(&y.data()[..2], &[0.0, 0.0]);
        assert!((y.data()[2] + 1.0).abs() < 1e-4);
        assert!((y.data()[3] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn linear_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t64(&[2, 1], &[1.0, 1.0]));
        let b = tape.constant(t64(&[1], &[0.5]));
        assert_eq!(x.linear(w, b).unwrap().value().data(), &[3.5]);

        let eye = tape.constant(Tensor::eye(2));
        let zero = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(x.linear(eye, zero).unwrap().value().data(), &[1.0, 2.0]);
        assert!(x.linear(w, zero).is_err());
    }

    #[test]
    fn reductions() {
        let tape = Tape::<f64>::new();
        let v = tape.constant(t64(&[2], &[3.0, 4.0]));
        assert_eq!(v.l2_norm_axis(0).unwrap().item(), 5.0);
        let z = tape.constant(Tensor::zeros(&[3, 2]));
        assert_eq!(z.mean_all().item(), 0.0);
        let m = tape.constant(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(m.sum_axis(0).unwrap().value().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(m.mean_axis(1).unwrap().value().data(), &[2.0, 5.0]);
        assert_eq!(m.transpose().unwrap().value().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(m.narrow(1, 1, 2).unwrap().value().data(), &[2.0, 3.0, 5.0, 6.0]);
        let c = concat(&[m, m.narrow(1, 0, 1).unwrap()], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 4]);
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 1.0, 4.0, 5.0, 6.0, 4.0]);
    }

    #[test]
    fn domain_violations_are_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(x.log(), Err(TensorError::Domain { .. })));
        let y = tape.constant(Tensor::new(&[1], vec![-1.0]).unwrap());
        assert!(matches!(y.sqrt(), Err(TensorError::Domain { .. })));
        let z = tape.constant(Tensor::new(&[1], vec![1000.0]).unwrap());
        assert!(matches!(z.exp(), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn topk_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.param(t64(&[4], &[5.0, 1.0, 3.0, 2.0]));
        let q = a.topk_mean(2).unwrap();
        assert_eq!(q.item(), 4.0);
        q.backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[0.5, 0.0, 0.5, 0.0]);
        assert_eq!(a.topk_mean(4).unwrap().item(), a.mean_all().item());
        assert!(a.topk_mean(0).is_err());
        assert!(a.topk_mean(5).is_err());
    }

    #[test]
    fn topk_ties_take_lowest_index() {
        let tape = Tape::<f64>::new();
        let a = tape.param(t64(&[4], &[1.0, 2.0, 2.0, 2.0]));
        let q = a.topk_mean(2).unwrap();
        q.backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[2, 3], 0.7));
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);

        let tape = Tape::<f64>::new();
        let x = tape.param(t64(&[2], &[1.0, 2.0]));
        x.square().mean_all().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeats() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[3]));
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(TensorError::NonScalarLoss(_))));
        let loss = y.sum_all();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(TensorError::BackwardTwice)));
        tape.clear_grads();
        assert!(x.grad().is_none());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::ones(&[2]));
        x.mul(c).unwrap().sum_all().backward().unwrap();
        assert!(x.grad().is_some());
        assert!(c.grad().is_none());
    }
}
