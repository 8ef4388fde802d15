// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode differentiation over 2-D arrays.
//!
//! Every operation evaluates eagerly and records itself on the [`Tape`].
//! [`Tape::backward`] walks the records in exact reverse order and
//! accumulates gradients into every node that depends on a parameter.
//!
//! Only the primitives the surrogate, the steering optimizer and the toy
//! MoE trainer need are provided. All values are 2-D (`rows × cols`);
//! scalars are `1 × 1`.

use crate::error::{Error, Result};
use crate::numerics::array::{gemm, Array};
use crate::numerics::sigmoid;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    GroupNorm { src: Var, group: usize, inv_std: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    SelectedSoftmax(Var),
    PrefixMax { src: Var, argmax: Vec<usize> },
    GatherRows { table: Var, rows: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Array },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Array {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Array {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Array::zeros(&self.shapes[v.0]))
    }
}

fn as_2d(a: &Array) -> (usize, usize) {
    (a.rows(), a.cols())
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

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        let value = if value.shape().len() == 2 {
            value
        } else {
            let (r, c) = as_2d(&value);
            value.reshape(&[r, c]).expect("same element count")
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        as_2d(&self.nodes[v.0].value)
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{m}x{k} times {k2}x{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Array::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(t, Op::Transpose(a), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let v = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(Error::shape(
                "add_row",
                format!("{m}x{n} plus {:?}", self.shape(row)),
            ));
        }
        let r = self.value(row).data();
        let mut v = self.value(a).clone();
        for i in 0..m {
            for (x, b) in v.row_slice_mut(i).iter_mut().zip(r) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(v, Op::AddRow(a, row), ng))
    }

    /// `a ⊙ row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(Error::shape(
                "mul_row",
                format!("{m}x{n} times {:?}", self.shape(row)),
            ));
        }
        let r = self.value(row).data();
        let mut v = self.value(a).clone();
        for i in 0..m {
            for (x, b) in v.row_slice_mut(i).iter_mut().zip(r) {
                *x *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(v, Op::MulRow(a, row), ng))
    }

    /// `a ⊙ col`, broadcasting an `m × 1` column over every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(col) != (m, 1) {
            return Err(Error::shape(
                "mul_col",
                format!("{m}x{n} times {:?}", self.shape(col)),
            ));
        }
        let c = self.value(col).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, s) in c.iter().enumerate() {
            for x in v.row_slice_mut(i) {
                *x *= s;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(v, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, factor), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array::scalar(x.sum() / x.len().max(1) as f64);
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a).clone().reshape(&[rows, cols])?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > m {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {m}", start + len),
            ));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(a);
        Ok(self.push(
            Array::matrix(len, n, data)?,
            Op::SliceRows { src: a, start },
            ng,
        ))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {n}", start + len),
            ));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x.row_slice(i)[start..start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Array::matrix(m, len, data)?,
            Op::SliceCols { src: a, start },
            ng,
        ))
    }

    /// Vertical concatenation of same-width blocks.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let n = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.shape(p);
            if c != n {
                return Err(Error::shape("concat_rows", format!("width {c} vs {n}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += m;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Array::matrix(rows, n, data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Standardizes every consecutive run of `group` columns within each row
    /// to zero mean and unit population variance, with `eps` inside the root.
    pub fn group_norm(&mut self, a: Var, group: usize, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(a);
        if group == 0 || n % group != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("width {n} not divisible by group {group}"),
            ));
        }
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m * n / group);
        for (src, dst) in x.data().chunks(group).zip(out.chunks_mut(group)) {
            inv_std.push(standardize_into(src, dst, eps));
        }
        let ng = self.ng(a);
        Ok(self.push(
            Array::matrix(m, n, out)?,
            Op::GroupNorm {
                src: a,
                group,
                inv_std,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy of an `n × 1` logit column against 0/1 targets,
    /// computed as `max(x,0) − x·y + log1p(exp(−|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (m, n) = self.shape(logits);
        if n != 1 || m != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{m}x{n} logits for {} targets", targets.len()),
            ));
        }
        let x = self.value(logits).data();
        let total: f64 = x
            .iter()
            .zip(targets)
            .map(|(&x, &y)| bce_term(x, y))
            .sum();
        let ng = self.ng(logits);
        Ok(self.push(
            Array::scalar(total / m as f64),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Records routing weights computed outside the tape.
    ///
    /// `weights` must hold, in every row, the softmax of `logits` restricted
    /// to that row's selected experts and zero elsewhere. The backward pass
    /// differentiates through the softmax of the selected entries only; the
    /// selection itself is treated as constant.
    pub fn selected_softmax(&mut self, logits: Var, weights: Array) -> Result<Var> {
        if self.shape(logits) != as_2d(&weights) {
            return Err(Error::shape(
                "selected_softmax",
                format!("{:?} vs {:?}", self.shape(logits), weights.shape()),
            ));
        }
        let ng = self.ng(logits);
        Ok(self.push(weights, Op::SelectedSoftmax(logits), ng))
    }

    /// Causal running maximum down the rows of each column.
    pub fn prefix_max(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        let mut argmax = vec![0usize; m * n];
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut best_row = 0;
            for i in 0..m {
                let v = x.at(i, j);
                if v > best {
                    best = v;
                    best_row = i;
                }
                out[i * n + j] = best;
                argmax[i * n + j] = best_row;
            }
        }
        let ng = self.ng(a);
        self.push(
            Array::matrix(m, n, out).expect("shape"),
            Op::PrefixMax { src: a, argmax },
            ng,
        )
    }

    /// Row lookup (embedding).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(table);
        let t = self.value(table);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Input(format!("row {r} out of range for table of {m}")));
            }
            data.extend_from_slice(t.row_slice(r));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Array::matrix(rows.len(), n, data)?,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy of each logit row against a class index.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(logits);
        if m != targets.len() || targets.iter().any(|&t| t >= n) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{m}x{n} logits for targets {targets:?}"),
            ));
        }
        let x = self.value(logits);
        let mut probs = Array::zeros(&[m, n]);
        let mut total = 0.0;
        for i in 0..m {
            let row = x.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs.row_slice_mut(i).iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            total += z.ln() + max - row[targets[i]];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Array::scalar(total / m.max(1) as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Array>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Array::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut da, 0.0);
                    self.accumulate(grads, *a, Array::matrix(m, k, da).expect("shape"));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut db, 0.0);
                    self.accumulate(grads, *b, Array::matrix(k, n, db).expect("shape"));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let da = g.zip_map(self.value(*b), |x, y| x * y).expect("shape");
                    self.accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let db = g.zip_map(self.value(*a), |x, y| x * y).expect("shape");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if self.ng(*a) {
                    let mut da = g.clone();
                    for k in 0..da.rows() {
                        for (x, s) in da.row_slice_mut(k).iter_mut().zip(r.data()) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.ng(*row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y).expect("shape");
                    self.accumulate(grads, *row, column_sums(&prod));
                }
            }
            Op::MulCol(a, col) => {
                let c = self.value(*col);
                if self.ng(*a) {
                    let mut da = g.clone();
                    for k in 0..da.rows() {
                        let s = c.data()[k];
                        for x in da.row_slice_mut(k) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.ng(*col) {
                    let x = self.value(*a);
                    let dc: Vec<f64> = (0..g.rows())
                        .map(|k| {
                            g.row_slice(k)
                                .iter()
                                .zip(x.row_slice(k))
                                .map(|(p, q)| p * q)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *col, Array::matrix(g.rows(), 1, dc).expect("shape"));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, |gv, s| gv * s * (1.0 - s)).expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(out, |gv, t| gv * (1.0 - t * t)).expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = g
                    .zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })
                    .expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g
                    .zip_map(self.value(*a), |gv, x| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let s = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Array::full(&s, g.data()[0]));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let s = x.shape().to_vec();
                let n = x.len().max(1) as f64;
                self.accumulate(grads, *a, Array::full(&s, g.data()[0] / n));
            }
            Op::Reshape(a) => {
                let s = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&s).expect("shape"));
            }
            Op::SliceRows { src, start } => {
                let (m, n) = self.shape(*src);
                let mut d = Array::zeros(&[m, n]);
                d.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *src, d);
            }
            Op::SliceCols { src, start } => {
                let (m, n) = self.shape(*src);
                let w = g.cols();
                let mut d = Array::zeros(&[m, n]);
                for k in 0..m {
                    d.row_slice_mut(k)[*start..start + w].copy_from_slice(g.row_slice(k));
                }
                self.accumulate(grads, *src, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (m, n) = self.shape(p);
                    if self.ng(p) {
                        let d = g.data()[offset..offset + m * n].to_vec();
                        self.accumulate(grads, p, Array::matrix(m, n, d).expect("shape"));
                    }
                    offset += m * n;
                }
            }
            Op::GroupNorm {
                src,
                group,
                inv_std,
            } => {
                let mut d = vec![0.0; g.len()];
                for (((gy, y), dx), inv) in g
                    .data()
                    .chunks(*group)
                    .zip(out.data().chunks(*group))
                    .zip(d.chunks_mut(*group))
                    .zip(inv_std)
                {
                    let n = *group as f64;
                    let mean_g: f64 = gy.iter().sum::<f64>() / n;
                    let mean_gy: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, a), b) in dx.iter_mut().zip(gy).zip(y) {
                        *o = inv * (a - mean_g - b * mean_gy);
                    }
                }
                let s = self.value(*src).shape().to_vec();
                self.accumulate(grads, *src, Array::new(s, d).expect("shape"));
            }
            Op::BceWithLogits { logits, targets } => {
                let n = targets.len() as f64;
                let scale = g.data()[0] / n;
                let x = self.value(*logits);
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| scale * (sigmoid(x) - y))
                    .collect();
                self.accumulate(grads, *logits, Array::matrix(d.len(), 1, d).expect("shape"));
            }
            Op::SelectedSoftmax(logits) => {
                let mut d = Array::zeros(out.shape());
                for k in 0..out.rows() {
                    let w = out.row_slice(k);
                    let gw = g.row_slice(k);
                    let s: f64 = w.iter().zip(gw).map(|(a, b)| a * b).sum();
                    for ((o, &wj), &gj) in d.row_slice_mut(k).iter_mut().zip(w).zip(gw) {
                        if wj > 0.0 {
                            *o = wj * (gj - s);
                        }
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::PrefixMax { src, argmax } => {
                let (m, n) = self.shape(*src);
                let mut d = Array::zeros(&[m, n]);
                for i in 0..m {
                    for j in 0..n {
                        let r = argmax[i * n + j];
                        d.data_mut()[r * n + j] += g.data()[i * n + j];
                    }
                }
                self.accumulate(grads, *src, d);
            }
            Op::GatherRows { table, rows } => {
                let (m, n) = self.shape(*table);
                let mut d = Array::zeros(&[m, n]);
                for (k, &r) in rows.iter().enumerate() {
                    for (o, v) in d.row_slice_mut(r).iter_mut().zip(g.row_slice(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.data()[0] / targets.len().max(1) as f64;
                let mut d = probs.map(|p| p * scale);
                for (k, &t) in targets.iter().enumerate() {
                    let c = d.cols();
                    d.data_mut()[k * c + t] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

/// Per-element BCE-with-logits in the overflow-free form.
pub fn bce_term(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

/// Standardizes `src` into `dst` (population variance, `eps` inside the
/// root) and returns the inverse standard deviation used.
pub(crate) fn standardize_into(src: &[f64], dst: &mut [f64], eps: f64) -> f64 {
    let n = src.len() as f64;
    let mean = src.iter().sum::<f64>() / n;
    let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - mean) * inv;
    }
    inv
}

fn column_sums(g: &Array) -> Array {
    let n = g.cols();
    let mut out = vec![0.0; n];
    for k in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row_slice(k)) {
            *o += v;
        }
    }
    Array::row(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut t = Tape::new();
        let p = t.param(Array::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(p), Array::ones(&[2, 3]));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let x = Array::matrix(1, 4, vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let mut t = Tape::new();
        let p = t.param(x.clone());
        let sq = t.mul(p, p).unwrap();
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(p), x);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut t = Tape::new();
        let p = t.param(Array::zeros(&[2, 2]));
        assert!(matches!(t.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_nodes_get_zero_gradients() {
        let mut t = Tape::new();
        let p = t.param(Array::ones(&[1, 2]));
        let unused = t.param(Array::ones(&[3, 1]));
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(unused), Array::zeros(&[3, 1]));
    }

    #[test]
    fn constants_are_not_differentiated() {
        let mut t = Tape::new();
        let c = t.constant(Array::ones(&[1, 2]));
        let p = t.param(Array::ones(&[1, 2]));
        let m = t.mul(c, p).unwrap();
        let loss = t.sum(m);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(c), Array::zeros(&[1, 2]));
        assert_eq!(g.get(p), Array::ones(&[1, 2]));
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let p = t.param(Array::row(vec![-1.0, 0.0, 2.0]));
        let a = t.abs(p);
        let loss = t.sum(a);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(p).data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn bce_is_stable_at_extremes() {
        assert!((bce_term(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_term(30.0, 1.0) < 1e-12);
        assert!((bce_term(-30.0, 1.0) - 30.0).abs() < 1e-9);
        assert!(bce_term(-1e6, 1.0).is_finite());
    }
}
