//! Dynamic reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only arena of nodes; [`Var`] is an index into it.
//! Every primitive validates shapes at construction and knows its exact
//! vector-Jacobian product. [`Graph::backward`] walks the tape once in
//! reverse, accumulating adjoints, and deposits gradients on leaf tensors.

use super::Tensor;
use crate::error::{CoreError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
#[allow(dead_code)] // saved operands document each node even when a VJP ignores them
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Concat(Var, Var),
    Dot(Var, Var),
    RowDot(Var, Var),
    Softmax(Var),
    ScaleRows(Var, Var),
    DivScalar(Var, Var),
    IndexRows(Var, Vec<usize>),
    RowSelect(Vec<Var>, Vec<usize>),
    SliceCol(Var, usize),
    DivRows(Var, Var),
    Clamp(Var, f64, f64),
    StopGrad(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    requires: bool,
}

/// Append-only computation tape. Rebuilt per update step; not shared across
/// threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    /// Gradient accumulated on a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Insert an external tensor as a leaf.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Insert a constant (never receives gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(Tensor::scalar(x), false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires: bool) -> Var {
        self.nodes.push(Node { op, value, requires });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, op: Op, value: Tensor, input: Var) -> Var {
        let req = self.nodes[input.0].requires;
        self.push(op, value, req)
    }

    fn binary(&mut self, op: Op, value: Tensor, a: Var, b: Var) -> Var {
        let req = self.nodes[a.0].requires || self.nodes[b.0].requires;
        self.push(op, value, req)
    }

    /// (m,k) x (k,n) -> (m,n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta.rows_cols();
        let (kb, n) = tb.rows_cols();
        if k != kb {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = matmul_nn(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out).unwrap();
        Ok(self.binary(Op::MatMul(a, b), value, a, b))
    }

    /// Elementwise add; `b` may be a rank-1 bias broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x + y)
                .collect();
            Tensor::new(ta.shape().to_vec(), data).unwrap()
        } else {
            let (rows, cols) = ta.rows_cols();
            if tb.shape().len() != 1 || tb.numel() != cols {
                return Err(CoreError::ShapeMismatch {
                    op: "add",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let mut data = ta.data().to_vec();
            for r in 0..rows {
                let row = &mut data[r * cols..(r + 1) * cols];
                for (x, y) in row.iter_mut().zip(tb.data()) {
                    *x += y;
                }
            }
            Tensor::new(ta.shape().to_vec(), data).unwrap()
        };
        Ok(self.binary(Op::Add(a, b), value, a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise multiply, same shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("mul", ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        Ok(self.binary(Op::Mul(a, b), value, a, b))
    }

    /// Elementwise minimum, same shapes. Ties route gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("min", ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| if x <= y { *x } else { *y })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        Ok(self.binary(Op::Min(a, b), value, a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| c * x).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.unary(Op::Scale(a, c), value, a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| c + x).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.unary(Op::AddScalar(a, c), value, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.unary(Op::Relu(a), value, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.unary(Op::Tanh(a), value, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(ta.numel());
        for &x in ta.data() {
            let y = x.exp();
            if !y.is_finite() {
                return Err(CoreError::Domain {
                    op: "exp",
                    detail: format!("exp({x}) is not finite"),
                });
            }
            data.push(y);
        }
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        Ok(self.unary(Op::Exp(a), value, a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(ta.numel());
        for &x in ta.data() {
            if x <= 0.0 {
                return Err(CoreError::Domain {
                    op: "log",
                    detail: format!("log({x}) undefined"),
                });
            }
            data.push(x.ln());
        }
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        Ok(self.unary(Op::Log(a), value, a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * x).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.unary(Op::Square(a), value, a)
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.unary(Op::Sum(a), Tensor::scalar(s), a)
    }

    /// Mean of all elements -> scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.unary(Op::Mean(a), Tensor::scalar(s), a)
    }

    /// Row sums of (B,n) -> (B,1).
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (rows, cols) = t.rows_cols();
        let data: Vec<f64> = (0..rows)
            .map(|r| t.data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let value = Tensor::new(vec![rows, 1], data).unwrap();
        self.unary(Op::SumRows(a), value, a)
    }

    /// Concatenate along the last axis. Both rank-1, or both rank-2 with
    /// equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = match (ta.shape().len(), tb.shape().len()) {
            (1, 1) => {
                let mut data = ta.data().to_vec();
                data.extend_from_slice(tb.data());
                Tensor::vector(data)
            }
            (2, 2) if ta.shape()[0] == tb.shape()[0] => {
                let rows = ta.shape()[0];
                let (ca, cb) = (ta.shape()[1], tb.shape()[1]);
                let mut data = Vec::with_capacity(rows * (ca + cb));
                for r in 0..rows {
                    data.extend_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
                    data.extend_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
                }
                Tensor::new(vec![rows, ca + cb], data).unwrap()
            }
            _ => {
                return Err(CoreError::ShapeMismatch {
                    op: "concat",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                })
            }
        };
        Ok(self.binary(Op::Concat(a, b), value, a, b))
    }

    /// Dot product of two rank-1 tensors -> scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("dot", ta, tb)?;
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.binary(Op::Dot(a, b), Tensor::scalar(s), a, b))
    }

    /// Row-wise dot of two (B,n) tensors -> (B,1).
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("row_dot", ta, tb)?;
        let (rows, cols) = ta.rows_cols();
        let data: Vec<f64> = (0..rows)
            .map(|r| {
                ta.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&tb.data()[r * cols..(r + 1) * cols])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let value = Tensor::new(vec![rows, 1], data).unwrap();
        Ok(self.binary(Op::RowDot(a, b), value, a, b))
    }

    /// Softmax along the last axis, numerically stabilised by max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (rows, cols) = t.rows_cols();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (i, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                data[r * cols + i] = e;
                z += e;
            }
            for i in 0..cols {
                data[r * cols + i] /= z;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.unary(Op::Softmax(a), value, a)
    }

    /// Multiply each row of `m` (B,n) by the per-row scalar in `v` (B,1).
    pub fn scale_rows(&mut self, v: Var, m: Var) -> Result<Var> {
        let (tv, tm) = (&self.nodes[v.0].value, &self.nodes[m.0].value);
        let (rows, cols) = tm.rows_cols();
        if tv.numel() != rows {
            return Err(CoreError::ShapeMismatch {
                op: "scale_rows",
                lhs: tv.shape().to_vec(),
                rhs: tm.shape().to_vec(),
            });
        }
        let mut data = tm.data().to_vec();
        for r in 0..rows {
            let s = tv.data()[r];
            for x in &mut data[r * cols..(r + 1) * cols] {
                *x *= s;
            }
        }
        let value = Tensor::new(tm.shape().to_vec(), data).unwrap();
        Ok(self.binary(Op::ScaleRows(v, m), value, v, m))
    }

    /// Elementwise division of `a` by a scalar node `b`.
    pub fn div_scalar(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !tb.is_scalar() {
            return Err(CoreError::ShapeMismatch {
                op: "div_scalar",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let d = tb.item();
        if d == 0.0 {
            return Err(CoreError::Domain {
                op: "div_scalar",
                detail: "division by zero".into(),
            });
        }
        let data = ta.data().iter().map(|x| x / d).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        Ok(self.binary(Op::DivScalar(a, b), value, a, b))
    }

    /// Gather rows of `src` (N,n) by index -> (len(idx), n).
    pub fn index_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        let (rows, cols) = t.rows_cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(CoreError::Domain {
                op: "index_rows",
                detail: format!("row index {bad} out of range for {rows} rows"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![idx.len(), cols], data).unwrap();
        Ok(self.unary(Op::IndexRows(src, idx.to_vec()), value, src))
    }

    /// Per-row selection across candidate tensors: output row r is row r of
    /// `inputs[idx[r]]`. All inputs share shape (B,n); used to route batch
    /// rows to per-task heads.
    pub fn row_select(&mut self, inputs: &[Var], idx: &[usize]) -> Result<Var> {
        assert!(!inputs.is_empty());
        let shape = self.nodes[inputs[0].0].value.shape().to_vec();
        for &v in inputs {
            if self.nodes[v.0].value.shape() != shape.as_slice() {
                return Err(CoreError::ShapeMismatch {
                    op: "row_select",
                    lhs: shape,
                    rhs: self.nodes[v.0].value.shape().to_vec(),
                });
            }
        }
        let (rows, cols) = self.nodes[inputs[0].0].value.rows_cols();
        if idx.len() != rows || idx.iter().any(|&i| i >= inputs.len()) {
            return Err(CoreError::Domain {
                op: "row_select",
                detail: format!("index list of {} for {} rows / {} inputs", idx.len(), rows, inputs.len()),
            });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for (r, &i) in idx.iter().enumerate() {
            data.extend_from_slice(&self.nodes[inputs[i].0].value.data()[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(vec![rows, cols], data).unwrap();
        let req = inputs.iter().any(|v| self.nodes[v.0].requires);
        Ok(self.push(Op::RowSelect(inputs.to_vec(), idx.to_vec()), value, req))
    }

    /// Column `j` of a (B,n) tensor as (B,1).
    pub fn slice_col(&mut self, a: Var, j: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (rows, cols) = t.rows_cols();
        if j >= cols {
            return Err(CoreError::Domain {
                op: "slice_col",
                detail: format!("column {j} out of range for {cols} columns"),
            });
        }
        let data: Vec<f64> = (0..rows).map(|r| t.data()[r * cols + j]).collect();
        let value = Tensor::new(vec![rows, 1], data).unwrap();
        Ok(self.unary(Op::SliceCol(a, j), value, a))
    }

    /// Divide each row of `a` (B,n) by the per-row scalar in `v` (B,1).
    pub fn div_rows(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        let (rows, cols) = ta.rows_cols();
        if tv.numel() != rows {
            return Err(CoreError::ShapeMismatch {
                op: "div_rows",
                lhs: ta.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        if tv.data().iter().any(|&x| x == 0.0) {
            return Err(CoreError::Domain {
                op: "div_rows",
                detail: "division by zero row scalar".into(),
            });
        }
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            let s = tv.data()[r];
            for x in &mut data[r * cols..(r + 1) * cols] {
                *x /= s;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        Ok(self.binary(Op::DivRows(a, v), value, a, v))
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.clamp(lo, hi)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.unary(Op::Clamp(a, lo, hi), value, a)
    }

    /// Value-identical copy whose upstream gradient contribution is zero.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = Tensor::new(
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[a.0].value.data().to_vec(),
        )
        .unwrap();
        self.push(Op::StopGrad(a), value, false)
    }

    /// Reparameterized Gaussian sample: mean + exp(log_std) * noise, with
    /// `noise` entering as a constant so gradients flow only into the
    /// distribution parameters.
    pub fn gaussian_sample(&mut self, mean: Var, log_std: Var, noise: &Tensor) -> Result<Var> {
        same_shape("gaussian_sample", &self.nodes[mean.0].value, &self.nodes[log_std.0].value)?;
        same_shape("gaussian_sample", &self.nodes[mean.0].value, noise)?;
        let std = self.exp(log_std)?;
        let n = self.constant(noise.clone());
        let scaled = self.mul(std, n)?;
        self.add(mean, scaled)
    }

    /// Linear layer: x @ w + b.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse pass from a scalar loss. Accumulates gradients additively into
    /// every reachable leaf with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(CoreError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let Some(d) = adj[i].take() else { continue };
            // Leaves keep their adjoint as the final gradient.
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.value.grad {
                    Some(g) => {
                        for (gi, di) in g.iter_mut().zip(&d) {
                            *gi += di;
                        }
                    }
                    None => node.value.grad = Some(d),
                }
                continue;
            }
            self.apply_vjp(i, &d, &mut adj);
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], v: Var, upd: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires {
            return;
        }
        let slot = &mut adj[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.numel()]);
        }
        upd(slot.as_mut().unwrap());
    }

    fn apply_vjp(&mut self, i: usize, d: &[f64], adj: &mut [Option<Vec<f64>>]) {
        // Split borrows: values read-only, adjoints mutable.
        match &self.nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k) = ta.rows_cols();
                let (_, nn) = tb.rows_cols();
                if self.nodes[a.0].requires {
                    let da = matmul_nt(d, tb.data(), m, nn, k);
                    self.accumulate(adj, a, |g| add_into(g, &da));
                }
                if self.nodes[b.0].requires {
                    let db = matmul_tn(ta.data(), d, m, k, nn);
                    self.accumulate(adj, b, |g| add_into(g, &db));
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(adj, a, |g| add_into(g, d));
                let tb_len = self.nodes[b.0].value.numel();
                if tb_len == d.len() {
                    self.accumulate(adj, b, |g| add_into(g, d));
                } else {
                    // bias broadcast over rows: column sums
                    let cols = tb_len;
                    self.accumulate(adj, b, |g| {
                        for (j, x) in d.iter().enumerate() {
                            g[j % cols] += x;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let tb = self.nodes[b.0].value.data().to_vec();
                let ta = self.nodes[a.0].value.data().to_vec();
                self.accumulate(adj, a, |g| {
                    for ((g, d), y) in g.iter_mut().zip(d).zip(&tb) {
                        *g += d * y;
                    }
                });
                self.accumulate(adj, b, |g| {
                    for ((g, d), x) in g.iter_mut().zip(d).zip(&ta) {
                        *g += d * x;
                    }
                });
            }
            Op::Min(a, b) => {
                let (a, b) = (*a, *b);
                let ta = self.nodes[a.0].value.data().to_vec();
                let tb = self.nodes[b.0].value.data().to_vec();
                self.accumulate(adj, a, |g| {
                    for i in 0..d.len() {
                        if ta[i] <= tb[i] {
                            g[i] += d[i];
                        }
                    }
                });
                self.accumulate(adj, b, |g| {
                    for i in 0..d.len() {
                        if ta[i] > tb[i] {
                            g[i] += d[i];
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accumulate(adj, a, |g| {
                    for (g, x) in g.iter_mut().zip(d) {
                        *g += c * x;
                    }
                });
            }
            Op::AddScalar(a, _) => {
                let a = *a;
                self.accumulate(adj, a, |g| add_into(g, d));
            }
            Op::Relu(a) => {
                let a = *a;
                let tx = self.nodes[a.0].value.data().to_vec();
                self.accumulate(adj, a, |g| {
                    for i in 0..d.len() {
                        if tx[i] > 0.0 {
                            g[i] += d[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let a = *a;
                let ty = self.nodes[i].value.data().to_vec();
                self.accumulate(adj, a, |g| {
                    for i in 0..d.len() {
                        g[i] += d[i] * (1.0 - ty[i] * ty[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let a = *a;
                let ty = self.nodes[i].value.data().to_vec();
                self.accumulate(adj, a, |g| {
                    for i in 0..d.len() {
                        g[i] += d[i] * ty[i];
                    }
                });
            }
            Op::Log(a) => {
                let a = *a;
                let tx = self.nodes[a.0].value.data().to_vec();
                self.accumulate(adj, a, |g| {
                    for i in 0..d.len() {
                        g[i] += d[i] / tx[i];
                    }
                });
            }
            Op::Square(a) => {
                let a = *a;
                let tx = self.nodes[a.0].value.data().to_vec();
                self.accumulate(adj, a, |g| {
                    for i in 0..d.len() {
                        g[i] += d[i] * 2.0 * tx[i];
                    }
                });
            }
            Op::Sum(a) => {
                let a = *a;
                let s = d[0];
                self.accumulate(adj, a, |g| {
                    for g in g.iter_mut() {
                        *g += s;
                    }
                });
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.nodes[a.0].value.numel() as f64;
                let s = d[0] / n;
                self.accumulate(adj, a, |g| {
                    for g in g.iter_mut() {
                        *g += s;
                    }
                });
            }
            Op::SumRows(a) => {
                let a = *a;
                let (rows, cols) = self.nodes[a.0].value.rows_cols();
                self.accumulate(adj, a, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[r * cols + c] += d[r];
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let (a, b) = (*a, *b);
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                if ta.shape().len() == 1 {
                    let na = ta.numel();
                    self.accumulate(adj, a, |g| add_into(g, &d[..na]));
                    self.accumulate(adj, b, |g| add_into(g, &d[na..]));
                } else {
                    let rows = ta.shape()[0];
                    let (ca, cb) = (ta.shape()[1], tb.shape()[1]);
                    self.accumulate(adj, a, |g| {
                        for r in 0..rows {
                            for c in 0..ca {
                                g[r * ca + c] += d[r * (ca + cb) + c];
                            }
                        }
                    });
                    self.accumulate(adj, b, |g| {
                        for r in 0..rows {
                            for c in 0..cb {
                                g[r * cb + c] += d[r * (ca + cb) + ca + c];
                            }
                        }
                    });
                }
            }
            Op::Dot(a, b) => {
                let (a, b) = (*a, *b);
                let ta = self.nodes[a.0].value.data().to_vec();
                let tb = self.nodes[b.0].value.data().to_vec();
                let s = d[0];
                self.accumulate(adj, a, |g| {
                    for (g, y) in g.iter_mut().zip(&tb) {
                        *g += s * y;
                    }
                });
                self.accumulate(adj, b, |g| {
                    for (g, x) in g.iter_mut().zip(&ta) {
                        *g += s * x;
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (a, b) = (*a, *b);
                let ta = self.nodes[a.0].value.data().to_vec();
                let tb = self.nodes[b.0].value.data().to_vec();
                let (rows, cols) = self.nodes[a.0].value.rows_cols();
                self.accumulate(adj, a, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[r * cols + c] += d[r] * tb[r * cols + c];
                        }
                    }
                });
                self.accumulate(adj, b, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[r * cols + c] += d[r] * ta[r * cols + c];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let a = *a;
                let ty = self.nodes[i].value.data().to_vec();
                let (rows, cols) = self.nodes[i].value.rows_cols();
                self.accumulate(adj, a, |g| {
                    for r in 0..rows {
                        let y = &ty[r * cols..(r + 1) * cols];
                        let dr = &d[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for c in 0..cols {
                            g[r * cols + c] += y[c] * (dr[c] - dot);
                        }
                    }
                });
            }
            Op::ScaleRows(v, m) => {
                let (v, m) = (*v, *m);
                let tv = self.nodes[v.0].value.data().to_vec();
                let tm = self.nodes[m.0].value.data().to_vec();
                let (rows, cols) = self.nodes[m.0].value.rows_cols();
                self.accumulate(adj, v, |g| {
                    for r in 0..rows {
                        let mut s = 0.0;
                        for c in 0..cols {
                            s += d[r * cols + c] * tm[r * cols + c];
                        }
                        g[r] += s;
                    }
                });
                self.accumulate(adj, m, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[r * cols + c] += tv[r] * d[r * cols + c];
                        }
                    }
                });
            }
            Op::DivScalar(a, b) => {
                let (a, b) = (*a, *b);
                let ta = self.nodes[a.0].value.data().to_vec();
                let s = self.nodes[b.0].value.item();
                self.accumulate(adj, a, |g| {
                    for (g, x) in g.iter_mut().zip(d) {
                        *g += x / s;
                    }
                });
                self.accumulate(adj, b, |g| {
                    let mut acc = 0.0;
                    for (x, dq) in ta.iter().zip(d) {
                        acc -= dq * x / (s * s);
                    }
                    g[0] += acc;
                });
            }
            Op::IndexRows(src, idx) => {
                let src = *src;
                let idx = idx.clone();
                let cols = self.nodes[i].value.rows_cols().1;
                self.accumulate(adj, src, |g| {
                    for (r, &srow) in idx.iter().enumerate() {
                        for c in 0..cols {
                            g[srow * cols + c] += d[r * cols + c];
                        }
                    }
                });
            }
            Op::RowSelect(inputs, idx) => {
                let inputs = inputs.clone();
                let idx = idx.clone();
                let cols = self.nodes[i].value.rows_cols().1;
                for (r, &which) in idx.iter().enumerate() {
                    let v = inputs[which];
                    self.accumulate(adj, v, |g| {
                        for c in 0..cols {
                            g[r * cols + c] += d[r * cols + c];
                        }
                    });
                }
            }
            Op::SliceCol(a, j) => {
                let (a, j) = (*a, *j);
                let cols = self.nodes[a.0].value.rows_cols().1;
                self.accumulate(adj, a, |g| {
                    for (r, dv) in d.iter().enumerate() {
                        g[r * cols + j] += dv;
                    }
                });
            }
            Op::DivRows(a, v) => {
                let (a, v) = (*a, *v);
                let ta = self.nodes[a.0].value.data().to_vec();
                let tv = self.nodes[v.0].value.data().to_vec();
                let (rows, cols) = self.nodes[a.0].value.rows_cols();
                self.accumulate(adj, a, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[r * cols + c] += d[r * cols + c] / tv[r];
                        }
                    }
                });
                self.accumulate(adj, v, |g| {
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for c in 0..cols {
                            acc -= d[r * cols + c] * ta[r * cols + c] / (tv[r] * tv[r]);
                        }
                        g[r] += acc;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let tx = self.nodes[a.0].value.data().to_vec();
                self.accumulate(adj, a, |g| {
                    for i in 0..d.len() {
                        if tx[i] > lo && tx[i] < hi {
                            g[i] += d[i];
                        }
                    }
                });
            }
            Op::StopGrad(_) => unreachable!("stop_gradient nodes never require grad"),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// C = A(m,k) * B(k,n), ikj order so the inner loop vectorises.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cx, bx) in crow.iter_mut().zip(brow) {
                *cx += av * bx;
            }
        }
    }
    c
}

/// C = A(m,n) * B(k,n)^T -> (m,k). Rows of both operands are contiguous.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C = A(m,k)^T * B(m,n) -> (k,n).
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cx, bx) in crow.iter_mut().zip(brow) {
                *cx += av * bx;
            }
        }
    }
    c
}
