//! Dense 64-bit tensors with tape-based reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the tape once in reverse and accumulates exact gradients. Shapes are
//! two-dimensional (`rows x cols`); the only implicit broadcast is between a
//! one-element tensor and an arbitrary tensor.
//!
//! ```
//! use postocr_core::numkit::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.constant(Tensor::scalar(2.0));
//! let y = tape.leaf(Tensor::scalar(3.0));
//! let z = tape.mul(x, y).unwrap();
//! let grads = tape.backward(z).unwrap();
//! assert_eq!(grads.get(y).unwrap().data(), &[2.0]);
//! ```

use std::borrow::Cow;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("index {index} out of range for {op} with bound {bound}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::ShapeMismatch {
                op: "from_vec",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape: [rows, cols],
            data,
        })
    }

    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: [1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: [1, 1],
            data: vec![v],
        }
    }

    /// Uniform in `[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self {
            shape: [rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
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
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Embedding(Var, Vec<usize>),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Min(Var, Var),
    Sum(Var),
    Log(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation. Leaves may borrow
/// parameter tensors for the tape's lifetime.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let [r, c] = self.shapes[v.0];
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(r, c))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumError {
    NumError::ShapeMismatch {
        op,
        left: a.shape.to_vec(),
        right: b.shape.to_vec(),
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

fn accumulate(slot: &mut Option<Tensor>, shape: [usize; 2], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
    f(&mut t.data);
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFiniteValue(name));
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf owning its value.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf borrowing a parameter tensor.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        let [m, k] = av.shape;
        let [k2, n] = bv.shape;
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &x) in av.data[i * k..(i + 1) * k].iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in orow.iter_mut().zip(&bv.data[kk * n..(kk + 1) * n]) {
                    *o += x * w;
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor { shape: [m, n], data: out }, Op::MatMul(a, b), ng, "matmul")
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.shape == bv.shape {
            Tensor {
                shape: av.shape,
                data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else if bv.len() == 1 {
            let y = bv.data[0];
            Tensor {
                shape: av.shape,
                data: av.data.iter().map(|&x| f(x, y)).collect(),
            }
        } else if av.len() == 1 {
            let x = av.data[0];
            Tensor {
                shape: bv.shape,
                data: bv.data.iter().map(|&y| f(x, y)).collect(),
            }
        } else {
            return Err(mismatch(name, av, bv));
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.broadcast_binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.broadcast_binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.broadcast_binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; the gradient goes to the smaller operand, ties to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(mismatch("min", av, bv));
        }
        self.broadcast_binary(a, b, "min", f64::min, Op::Min(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumError> {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape,
            data: v.data.iter().map(|x| x * s).collect(),
        };
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, NumError> {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape,
            data: v.data.iter().map(|x| x + s).collect(),
        };
        let ng = self.needs(a);
        self.push(value, Op::AddScalar(a), ng, "add_scalar")
    }

    /// Concatenates along columns; all parts must have equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(mismatch("concat", self.value(parts[0]), v));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor { shape: [rows, cols], data }, Op::ConcatCols(parts.to_vec()), ng, "concat")
    }

    /// Stacks parts vertically; all parts must have equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(mismatch("concat_rows", self.value(parts[0]), v));
            }
            rows += v.rows();
            data.extend_from_slice(&v.data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor { shape: [rows, cols], data }, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    /// Columns `start..end` of every row.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let v = self.value(a);
        if start > end || end > v.cols() {
            return Err(NumError::OutOfRange {
                op: "slice",
                index: end,
                bound: v.cols(),
            });
        }
        let mut data = Vec::with_capacity(v.rows() * (end - start));
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row_slice(r)[start..end]);
        }
        let value = Tensor {
            shape: [v.rows(), end - start],
            data,
        };
        let ng = self.needs(a);
        self.push(value, Op::SliceCols(a, start), ng, "slice")
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumError> {
        let v = self.value(a);
        if v.len() != rows * cols {
            return Err(NumError::ShapeMismatch {
                op: "reshape",
                left: v.shape.to_vec(),
                right: vec![rows, cols],
            });
        }
        let value = Tensor {
            shape: [rows, cols],
            data: v.data.clone(),
        };
        let ng = self.needs(a);
        self.push(value, Op::Reshape(a), ng, "reshape")
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            if id >= t.rows() {
                return Err(NumError::OutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    bound: t.rows(),
                });
            }
            data.extend_from_slice(t.row_slice(id));
        }
        let value = Tensor {
            shape: [ids.len(), t.cols()],
            data,
        };
        let ng = self.needs(table);
        self.push(value, Op::Embedding(table, ids.to_vec()), ng, "embedding_lookup")
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, NumError> {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape,
            data: v.data.iter().map(|&x| f(x)).collect(),
        };
        let ng = self.needs(a);
        self.push(value, op, ng, name)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, "log", f64::ln, Op::Log(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let v = self.value(a);
        let mut data = v.data.clone();
        for row in data.chunks_mut(v.cols().max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let value = Tensor { shape: v.shape, data };
        let ng = self.needs(a);
        self.push(value, Op::Softmax(a), ng, "softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.value(a).data.iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    /// Adds a list of same-shaped tensors.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumError::NotScalar(lv.shape.to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let shapes: Vec<[usize; 2]> = self.nodes.iter().map(|n| n.value.shape).collect();
        grads[loss.0] = Some(Tensor {
            shape: lv.shape,
            data: vec![1.0],
        });
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            let (head, _) = grads.split_at_mut(i);
            self.backprop(&node.op, &g, out, head, &shapes);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, op: &Op, g: &Tensor, out: &Tensor, grads: &mut [Option<Tensor>], shapes: &[[usize; 2]]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let [m, k] = av.shape;
                let n = bv.shape[1];
                if needs(*a) {
                    accumulate(&mut grads[a.0], shapes[a.0], |ga| {
                        for i in 0..m {
                            let grow = &g.data[i * n..(i + 1) * n];
                            for kk in 0..k {
                                let brow = &bv.data[kk * n..(kk + 1) * n];
                                ga[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], shapes[b.0], |gb| {
                        for i in 0..m {
                            let grow = &g.data[i * n..(i + 1) * n];
                            for kk in 0..k {
                                let x = av.data[i * k + kk];
                                if x == 0.0 {
                                    continue;
                                }
                                for (o, &y) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                    *o += x * y;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if needs(v) {
                        reduce_into(&mut grads[v.0], shapes[v.0], g, |x, _| s * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    reduce_into(&mut grads[a.0], shapes[a.0], g, |x, idx| x * pick(bv, idx));
                }
                if needs(*b) {
                    reduce_into(&mut grads[b.0], shapes[b.0], g, |x, idx| x * pick(av, idx));
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    accumulate(&mut grads[a.0], shapes[a.0], |ga| {
                        for (i, o) in ga.iter_mut().enumerate() {
                            if av.data[i] <= bv.data[i] {
                                *o += g.data[i];
                            }
                        }
                    });
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], shapes[b.0], |gb| {
                        for (i, o) in gb.iter_mut().enumerate() {
                            if bv.data[i] < av.data[i] {
                                *o += g.data[i];
                            }
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], shapes[a.0], |ga| {
                        for (o, x) in ga.iter_mut().zip(&g.data) {
                            *o += s * x;
                        }
                    });
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], shapes[a.0], |ga| {
                        for (o, x) in ga.iter_mut().zip(&g.data) {
                            *o += x;
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let cols = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = shapes[p.0][1];
                    if needs(p) {
                        accumulate(&mut grads[p.0], shapes[p.0], |gp| {
                            for r in 0..out.rows() {
                                let src = &g.data[r * cols + offset..r * cols + offset + pc];
                                for (o, x) in gp[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                    *o += x;
                                }
                            }
                        });
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = shapes[p.0][0] * shapes[p.0][1];
                    if needs(p) {
                        accumulate(&mut grads[p.0], shapes[p.0], |gp| {
                            for (o, x) in gp.iter_mut().zip(&g.data[offset..offset + len]) {
                                *o += x;
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                if needs(*a) {
                    let cols = shapes[a.0][1];
                    let w = out.cols();
                    accumulate(&mut grads[a.0], shapes[a.0], |ga| {
                        for r in 0..out.rows() {
                            for c in 0..w {
                                ga[r * cols + start + c] += g.data[r * w + c];
                            }
                        }
                    });
                }
            }
            Op::Embedding(table, ids) => {
                if needs(*table) {
                    let e = shapes[table.0][1];
                    accumulate(&mut grads[table.0], shapes[table.0], |gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            for (o, x) in gt[id * e..(id + 1) * e].iter_mut().zip(&g.data[r * e..(r + 1) * e]) {
                                *o += x;
                            }
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], shapes[a.0], |ga| {
                        for ((o, x), y) in ga.iter_mut().zip(&g.data).zip(&out.data) {
                            *o += x * y * (1.0 - y);
                        }
                    });
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], shapes[a.0], |ga| {
                        for ((o, x), y) in ga.iter_mut().zip(&g.data).zip(&out.data) {
                            *o += x * (1.0 - y * y);
                        }
                    });
                }
            }
            Op::Log(a) => {
                if needs(*a) {
                    let av = val(*a);
                    accumulate(&mut grads[a.0], shapes[a.0], |ga| {
                        for ((o, x), y) in ga.iter_mut().zip(&g.data).zip(&av.data) {
                            *o += x / y;
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let cols = out.cols().max(1);
                    accumulate(&mut grads[a.0], shapes[a.0], |ga| {
                        for ((orow, grow), yrow) in
                            ga.chunks_mut(cols).zip(g.data.chunks(cols)).zip(out.data.chunks(cols))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                            for ((o, x), y) in orow.iter_mut().zip(grow).zip(yrow) {
                                *o += y * (x - dot);
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let s = g.data[0];
                    accumulate(&mut grads[a.0], shapes[a.0], |ga| {
                        for o in ga.iter_mut() {
                            *o += s;
                        }
                    });
                }
            }
        }
    }
}

fn pick(t: &Tensor, idx: usize) -> f64 {
    if t.len() == 1 {
        t.data[0]
    } else {
        t.data[idx]
    }
}

/// Accumulates `f(g[idx], idx)` into a slot that may be a broadcast scalar.
fn reduce_into(slot: &mut Option<Tensor>, shape: [usize; 2], g: &Tensor, f: impl Fn(f64, usize) -> f64) {
    let scalar = shape[0] * shape[1] == 1 && g.len() != 1;
    accumulate(slot, shape, |dst| {
        if scalar {
            dst[0] += g.data.iter().enumerate().map(|(i, &x)| f(x, i)).sum::<f64>();
        } else {
            for (i, (o, &x)) in dst.iter_mut().zip(&g.data).enumerate() {
                *o += f(x, i);
            }
        }
    });
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Relative error with a small floor on the denominator so that coordinates
/// whose true gradient is zero compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares tape gradients of `f` against central differences with step `h`.
pub fn finite_diff_check<F>(params: &[Tensor], h: f64, f: F) -> Result<GradCheck, NumError>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var, NumError>,
{
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };
    let eval = |ps: &[Tensor]| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut work: Vec<Tensor> = params.to_vec();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for p in 0..work.len() {
        for i in 0..work[p].len() {
            let orig = work[p].data[i];
            work[p].data[i] = orig + h;
            let plus = eval(&work)?;
            work[p].data[i] = orig - h;
            let minus = eval(&work)?;
            work[p].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[p].data[i], numeric);
            if err > result.max_rel_error {
                result.max_rel_error = err;
                result.worst = (p, i);
            }
            result.coordinates += 1;
        }
    }
    Ok(result)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data[i] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

/// Scales the gradients so that their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PONUMKT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes named tensors: magic, version, endianness byte, count, then the
/// header (name, rows, cols per tensor), then every tensor's row-major values.
pub fn write_checkpoint(tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(0); // 0 = little endian
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    }
    for (_, t) in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, NumError> {
    let bad = |m: &str| NumError::Checkpoint(m.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], NumError> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad("unsupported version"));
    }
    if take(1)?[0] != 0 {
        return Err(bad("big-endian checkpoints are not supported"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut header = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        header.push((name, rows, cols));
    }
    let mut out = Vec::with_capacity(count);
    for (name, rows, cols) in header {
        let raw = take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor { shape: [rows, cols], data }));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn forward_examples() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s).item(), 0.5);

        let x = t.constant(Tensor::row(&[1.0, -3.0, 200.0, 0.5]));
        let p = t.softmax(x).unwrap();
        assert!((t.value(p).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(3, 4));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), [2, 4]);
        assert!(matches!(t.matmul(b, b), Err(NumError::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_trips() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[0.0, 1.0]));
        assert_eq!(t.log(x), Err(NumError::NonFiniteValue("log")));
    }

    #[test]
    fn simple_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let s = t.sigmoid(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let y = t.leaf(Tensor::scalar(3.0));
        let unused = t.leaf(Tensor::scalar(5.0));
        let p = t.mul(x, y).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
        assert_eq!(g.get(y).unwrap().item(), 2.0);
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused).item(), 0.0);

        let v = t.leaf(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(t.backward(v), Err(NumError::NotScalar(_))));
    }

    #[test]
    fn min_routes_ties_to_first() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::row(&[1.0, 2.0, 3.0]));
        let b = t.leaf(Tensor::row(&[1.0, 1.0, 4.0]));
        let m = t.min(a, b).unwrap();
        let s = t.sum(m).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 0.0, 1.0]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn embedding_scatters_to_looked_up_rows() {
        let table = Tensor::from_vec(4, 2, (0..8).map(f64::from).collect()).unwrap();
        let mut t = Tape::new();
        let tv = t.param(&table);
        let e = t.embedding_lookup(tv, &[2, 0, 2]).unwrap();
        let s = t.sum(e).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(tv).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
        assert!(t.embedding_lookup(tv, &[4]).is_err());
    }

    type Build = for<'t> fn(&mut Tape<'t>, &[Var]) -> Result<Var, NumError>;

    fn check(shapes: &[(usize, usize)], f: Build) -> f64 {
        let mut r = rng();
        let params: Vec<Tensor> = shapes.iter().map(|&(a, b)| Tensor::uniform(a, b, 1.0, &mut r)).collect();
        finite_diff_check(&params, 1e-5, f).unwrap().max_rel_error
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let cases: Vec<(&str, Vec<(usize, usize)>, Build)> = vec![
            ("matmul", vec![(2, 3), (3, 4)], |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let m = t.tanh(m)?;
                t.sum(m)
            }),
            ("add/sub", vec![(2, 3), (2, 3), (1, 1)], |t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(a, v[2])?;
                let c = t.mul(b, b)?;
                t.sum(c)
            }),
            ("mul+scale+add_scalar", vec![(1, 4), (1, 4)], |t, v| {
                let a = t.mul(v[0], v[1])?;
                let b = t.scale(a, -1.7)?;
                let c = t.add_scalar(b, 0.3)?;
                let d = t.tanh(c)?;
                t.sum(d)
            }),
            ("concat+slice", vec![(2, 2), (2, 3)], |t, v| {
                let c = t.concat(&[v[0], v[1]])?;
                let s = t.slice(c, 1, 4)?;
                let s2 = t.sigmoid(s)?;
                let r = t.concat_rows(&[s2, s])?;
                let q = t.mul(r, r)?;
                t.sum(q)
            }),
            ("embedding+reshape", vec![(5, 3)], |t, v| {
                let e = t.embedding_lookup(v[0], &[1, 4, 1])?;
                let r = t.reshape(e, 1, 9)?;
                let s = t.softmax(r)?;
                let l = t.log(s)?;
                let w = t.slice(l, 2, 3)?;
                t.sum(w)
            }),
            ("softmax rows", vec![(3, 4), (3, 4)], |t, v| {
                let s = t.softmax(v[0])?;
                let m = t.mul(s, v[1])?;
                t.sum(m)
            }),
            ("min", vec![(2, 5), (2, 5)], |t, v| {
                let m = t.min(v[0], v[1])?;
                let q = t.mul(m, m)?;
                t.sum(q)
            }),
            ("log", vec![(1, 3)], |t, v| {
                let s = t.sigmoid(v[0])?;
                let l = t.log(s)?;
                t.sum(l)
            }),
        ];
        for (name, shapes, f) in cases {
            let err = check(&shapes, f);
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn random_composite_graph() {
        let err = check(&[(1, 4), (4, 6), (1, 6), (6, 1)], |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add(h, v[2])?;
            let a = t.tanh(h)?;
            let b = t.sigmoid(h)?;
            let g = t.mul(a, b)?;
            let p = t.softmax(g)?;
            let y = t.matmul(p, v[3])?;
            let c = t.min(p, b)?;
            let s = t.sum(c)?;
            let out = t.add(y, s)?;
            t.sum(out)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn zero_and_linear_functions() {
        let params = vec![Tensor::row(&[1.0, -2.0])];
        let zero = finite_diff_check(&params, 1e-5, |t, v| {
            let s = t.scale(v[0], 0.0)?;
            t.sum(s)
        })
        .unwrap();
        assert_eq!(zero.max_rel_error, 0.0);
        let linear = finite_diff_check(&params, 1e-5, |t, v| {
            let s = t.scale(v[0], 3.0)?;
            t.sum(s)
        })
        .unwrap();
        assert!(linear.max_rel_error < 1e-9, "{}", linear.max_rel_error);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut x = Tensor::row(&[3.0, -2.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = Tensor::row(&[2.0 * x.data()[0], 2.0 * x.data()[1]]);
            opt.step(&mut [&mut x], &[g]);
        }
        assert!(x.sum_squares() < 1e-3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = Tensor::uniform(3, 2, 1.0, &mut rng());
        let b = Tensor::row(&[1.5]);
        let bytes = write_checkpoint(&[("a", &a), ("bias", &b)]);
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("bias".to_string(), b)]);
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(bytes[12], 0);
    }
}
