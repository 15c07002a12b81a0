//! Dense-tensor reverse-mode differentiation on a per-pass tape.
//!
//! Tensors live in an append-only arena owned by [`Tape`]; every operation
//! records its inputs so one [`Tape::backward`] pass can replay the tape in
//! reverse and accumulate gradients into every reachable leaf. Values are
//! `f64` throughout; the bound checks downstream need the headroom.
//!
//! Shape convention: a tensor's shape is an arbitrary dim list, but ops treat
//! it as a stack of rows over the last axis — `[B, K]` is `B` rows of width
//! `K`, `[K]` is a single row, `[]` is a scalar. Reductions (`row_sum`,
//! `logsumexp`, `p_norm`) drop the last axis. Broadcasting exists only where
//! a named op provides it (bias addition and the row-scalar ops); there is no
//! general broadcasting.
//!
//! A tape is confined to one forward/backward cycle on one thread and is
//! dropped afterwards; independent runs use independent tapes.

use crate::error::{Error, Result};

/// Handle to a tensor node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    /// Bias vector (length = cols) added to every row.
    AddBias(Var, Var),
    /// Vector (length = cols) multiplied elementwise into every row.
    MulBias(Var, Var),
    /// Per-row scalar (length = rows) subtracted from every row.
    SubRows(Var, Var),
    /// Per-row scalar multiplied into every row.
    MulRows(Var, Var),
    /// Per-row scalar divided into every row.
    DivRows(Var, Var),
    Exp(Var),
    Log(Var),
    /// clamp(x, lo, hi); gradient passes inside the band, 0 outside.
    Clamp(Var, f64, f64),
    /// log(clamp(x, lo, hi)); gradient is 1/x inside the clamp band, 0 outside.
    LogClamped(Var, f64, f64),
    Relu(Var),
    Sqrt(Var),
    /// Stable log-sum-exp over the last axis.
    LogSumExp(Var),
    /// Softmax over the last axis.
    Softmax(Var),
    /// p-norm over the last axis.
    PNorm(Var, f64),
    RowSum(Var),
    SumAll(Var),
    /// Same values under a new shape; gradient passes through unchanged.
    Reshape(Var),
    Detach(Var),
}

#[derive(Debug)]
struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

/// Gradient tape: arena of tensor nodes in topological order.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a shape into (rows, row width) over the last axis.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        Some(&c) => (numel(shape) / c.max(1), c),
        None => (1, 1),
    }
}

fn logsumexp_slice(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_slice(row: &[f64], out: &mut [f64]) {
    let lse = logsumexp_slice(row);
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - lse).exp();
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward values of a node.
    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` loss w.r.t. this node.
    /// `None` until `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).map(|g| g.as_slice())
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(values.len(), numel(&shape));
        self.nodes.push(Node { values, shape, op });
        Var(self.nodes.len() - 1)
    }

    // ── leaf constructors ────────────────────────────────────────────

    pub fn leaf(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if values.len() != numel(shape) {
            return Err(Error::ShapeMismatch { left: vec![values.len()], right: shape.to_vec() });
        }
        Ok(self.push(values, shape.to_vec(), Op::Leaf))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![value], vec![], Op::Leaf)
    }

    pub fn vector(&mut self, values: Vec<f64>) -> Var {
        let n = values.len();
        self.push(values, vec![n], Op::Leaf)
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        self.leaf(values, &[rows, cols])
    }

    // ── elementwise arithmetic ───────────────────────────────────────

    fn check_same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise sum. Also accepts a rank-1 `b` of length `cols(a)`,
    /// broadcast across rows (bias addition).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows_a, cols_a) = rows_cols(&self.nodes[a.0].shape);
        let b_shape = &self.nodes[b.0].shape;
        if self.nodes[a.0].shape != *b_shape {
            if b_shape.len() == 1 && b_shape[0] == cols_a && rows_a >= 1 {
                return self.add_bias(a, b);
            }
            return Err(Error::ShapeMismatch {
                left: self.nodes[a.0].shape.clone(),
                right: b_shape.clone(),
            });
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(values, self.nodes[a.0].shape.clone(), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(values, self.nodes[a.0].shape.clone(), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(values, self.nodes[a.0].shape.clone(), Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x / y)
            .collect();
        Ok(self.push(values, self.nodes[a.0].shape.clone(), Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        self.push(values, self.nodes[a.0].shape.clone(), Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x + c).collect();
        self.push(values, self.nodes[a.0].shape.clone(), Op::AddScalar(a))
    }

    // ── matrix product ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let a_shape = &self.nodes[a.0].shape;
        let b_shape = &self.nodes[b.0].shape;
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            let (m, k) = if a_shape.len() == 2 { (a_shape[0], a_shape[1]) } else { (0, 0) };
            let (k2, n) = if b_shape.len() == 2 { (b_shape[0], b_shape[1]) } else { (0, 0) };
            return Err(Error::MatmulDims { m, k, k2, n });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let mut values = vec![0.0; m * n];
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                for j in 0..n {
                    values[i * n + j] += x * bv[p * n + j];
                }
            }
        }
        Ok(self.push(values, vec![m, n], Op::MatMul(a, b)))
    }

    // ── broadcast helpers ────────────────────────────────────────────

    fn check_bias(&self, a: Var, b: Var) -> Result<(usize, usize)> {
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        if self.nodes[b.0].values.len() != cols {
            return Err(Error::ShapeMismatch {
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok((rows, cols))
    }

    /// Adds a width-`cols` vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.check_bias(a, b)?;
        let mut values = self.nodes[a.0].values.clone();
        for i in 0..rows {
            for j in 0..cols {
                values[i * cols + j] += self.nodes[b.0].values[j];
            }
        }
        Ok(self.push(values, self.nodes[a.0].shape.clone(), Op::AddBias(a, b)))
    }

    /// Multiplies every row of `a` elementwise by a width-`cols` vector.
    pub fn mul_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.check_bias(a, b)?;
        let mut values = self.nodes[a.0].values.clone();
        for i in 0..rows {
            for j in 0..cols {
                values[i * cols + j] *= self.nodes[b.0].values[j];
            }
        }
        Ok(self.push(values, self.nodes[a.0].shape.clone(), Op::MulBias(a, b)))
    }

    fn check_rowvec(&self, a: Var, v: Var) -> Result<(usize, usize)> {
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        if self.nodes[v.0].values.len() != rows || self.nodes[v.0].shape.len() > 1 {
            return Err(Error::ShapeMismatch {
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[v.0].shape.clone(),
            });
        }
        Ok((rows, cols))
    }

    /// Subtracts a per-row scalar from every element of the row.
    pub fn sub_rows(&mut self, a: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.check_rowvec(a, v)?;
        let mut values = self.nodes[a.0].values.clone();
        for i in 0..rows {
            for j in 0..cols {
                values[i * cols + j] -= self.nodes[v.0].values[i];
            }
        }
        Ok(self.push(values, self.nodes[a.0].shape.clone(), Op::SubRows(a, v)))
    }

    /// Multiplies every element of row `i` by `v[i]`.
    pub fn mul_rows(&mut self, a: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.check_rowvec(a, v)?;
        let mut values = self.nodes[a.0].values.clone();
        for i in 0..rows {
            for j in 0..cols {
                values[i * cols + j] *= self.nodes[v.0].values[i];
            }
        }
        Ok(self.push(values, self.nodes[a.0].shape.clone(), Op::MulRows(a, v)))
    }

    /// Divides every element of row `i` by `v[i]`.
    pub fn div_rows(&mut self, a: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.check_rowvec(a, v)?;
        let mut values = self.nodes[a.0].values.clone();
        for i in 0..rows {
            for j in 0..cols {
                values[i * cols + j] /= self.nodes[v.0].values[i];
            }
        }
        Ok(self.push(values, self.nodes[a.0].shape.clone(), Op::DivRows(a, v)))
    }

    // ── elementwise nonlinearities ───────────────────────────────────

    pub fn exp(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x.exp()).collect();
        self.push(values, self.nodes[a.0].shape.clone(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) =
            self.nodes[a.0].values.iter().enumerate().find(|(_, &x)| x <= 0.0)
        {
            return Err(Error::LogDomain { index, value });
        }
        let values = self.nodes[a.0].values.iter().map(|x| x.ln()).collect();
        Ok(self.push(values, self.nodes[a.0].shape.clone(), Op::Log(a)))
    }

    /// Clamps into `[lo, hi]`; inputs outside the band get a zero gradient.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x.clamp(lo, hi)).collect();
        self.push(values, self.nodes[a.0].shape.clone(), Op::Clamp(a, lo, hi))
    }

    /// log of the input clamped into `[lo, hi]`. Inputs outside the band get
    /// a zero gradient, which makes `clamp(m) * log_clamped(m)` a safe
    /// entropy term for masses that can be zero or stray negative.
    pub fn log_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x.clamp(lo, hi).ln()).collect();
        self.push(values, self.nodes[a.0].shape.clone(), Op::LogClamped(a, lo, hi))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x.max(0.0)).collect();
        self.push(values, self.nodes[a.0].shape.clone(), Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x.sqrt()).collect();
        self.push(values, self.nodes[a.0].shape.clone(), Op::Sqrt(a))
    }

    // ── reductions over the last axis ────────────────────────────────

    fn reduced_shape(shape: &[usize]) -> Vec<usize> {
        if shape.is_empty() { Vec::new() } else { shape[..shape.len() - 1].to_vec() }
    }

    /// Numerically stable `max + log(sum(exp(x - max)))` per row.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        let values = (0..rows)
            .map(|i| logsumexp_slice(&self.nodes[a.0].values[i * cols..(i + 1) * cols]))
            .collect();
        let shape = Self::reduced_shape(&self.nodes[a.0].shape);
        self.push(values, shape, Op::LogSumExp(a))
    }

    /// Softmax per row, computed as `exp(x - logsumexp(x))`.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        let mut values = vec![0.0; rows * cols];
        for i in 0..rows {
            softmax_slice(
                &self.nodes[a.0].values[i * cols..(i + 1) * cols],
                &mut values[i * cols..(i + 1) * cols],
            );
        }
        self.push(values, self.nodes[a.0].shape.clone(), Op::Softmax(a))
    }

    /// `(sum |x|^p)^(1/p)` per row. Gradient at an exactly-zero component
    /// (or an all-zero row) is defined as 0.
    pub fn p_norm(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(p >= 1.0) {
            return Err(Error::NormOrder(p));
        }
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        let values = (0..rows)
            .map(|i| {
                let row = &self.nodes[a.0].values[i * cols..(i + 1) * cols];
                row.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
            })
            .collect();
        let shape = Self::reduced_shape(&self.nodes[a.0].shape);
        Ok(self.push(values, shape, Op::PNorm(a, p)))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        let values = (0..rows)
            .map(|i| self.nodes[a.0].values[i * cols..(i + 1) * cols].iter().sum())
            .collect();
        let shape = Self::reduced_shape(&self.nodes[a.0].shape);
        self.push(values, shape, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].values.iter().sum();
        self.push(vec![total], vec![], Op::SumAll(a))
    }

    /// Relabels the element layout; element count must match.
    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        if numel(&self.nodes[a.0].shape) != numel(new_shape) {
            return Err(Error::ShapeMismatch {
                left: self.nodes[a.0].shape.clone(),
                right: new_shape.to_vec(),
            });
        }
        let values = self.nodes[a.0].values.clone();
        Ok(self.push(values, new_shape.to_vec(), Op::Reshape(a)))
    }

    // ── gradient control ─────────────────────────────────────────────

    /// Identity forward; backward treats the result as a constant.
    pub fn detach(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0].values.clone();
        self.push(values, self.nodes[a.0].shape.clone(), Op::Detach(a))
    }

    /// Reverse pass from a scalar loss. Fills the gradient of every node;
    /// leaves unreachable from the loss end up with zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.values.len()]).collect();
        self.grads[loss.0][0] = 1.0;

        for id in (0..=loss.0).rev() {
            let op = self.nodes[id].op.clone();
            // Inputs always precede outputs on the tape, so split at `id`.
            let (lower_g, upper_g) = self.grads.split_at_mut(id);
            let g = &upper_g[0];
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (ga, &gi) in lower_g[a.0].iter_mut().zip(g) {
                        *ga += gi;
                    }
                    for (gb, &gi) in lower_g[b.0].iter_mut().zip(g) {
                        *gb += gi;
                    }
                }
                Op::Sub(a, b) => {
                    for (ga, &gi) in lower_g[a.0].iter_mut().zip(g) {
                        *ga += gi;
                    }
                    for (gb, &gi) in lower_g[b.0].iter_mut().zip(g) {
                        *gb -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    for i in 0..g.len() {
                        lower_g[a.0][i] += g[i] * self.nodes[b.0].values[i];
                        lower_g[b.0][i] += g[i] * self.nodes[a.0].values[i];
                    }
                }
                Op::Div(a, b) => {
                    for i in 0..g.len() {
                        let bv = self.nodes[b.0].values[i];
                        lower_g[a.0][i] += g[i] / bv;
                        lower_g[b.0][i] -= g[i] * self.nodes[a.0].values[i] / (bv * bv);
                    }
                }
                Op::Scale(a, c) => {
                    for (ga, &gi) in lower_g[a.0].iter_mut().zip(g) {
                        *ga += gi * c;
                    }
                }
                Op::AddScalar(a) => {
                    for (ga, &gi) in lower_g[a.0].iter_mut().zip(g) {
                        *ga += gi;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    // dA += g . B^T ; dB += A^T . g
                    for i in 0..m {
                        for j in 0..n {
                            let gi = g[i * n + j];
                            if gi == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                lower_g[a.0][i * k + p] += gi * bv[p * n + j];
                                lower_g[b.0][p * n + j] += gi * av[i * k + p];
                            }
                        }
                    }
                }
                Op::AddBias(a, b) => {
                    let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
                    for i in 0..rows {
                        for j in 0..cols {
                            let gi = g[i * cols + j];
                            lower_g[a.0][i * cols + j] += gi;
                            lower_g[b.0][j] += gi;
                        }
                    }
                }
                Op::MulBias(a, b) => {
                    let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
                    for i in 0..rows {
                        for j in 0..cols {
                            let gi = g[i * cols + j];
                            lower_g[a.0][i * cols + j] += gi * self.nodes[b.0].values[j];
                            lower_g[b.0][j] += gi * self.nodes[a.0].values[i * cols + j];
                        }
                    }
                }
                Op::SubRows(a, v) => {
                    let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
                    for i in 0..rows {
                        for j in 0..cols {
                            let gi = g[i * cols + j];
                            lower_g[a.0][i * cols + j] += gi;
                            lower_g[v.0][i] -= gi;
                        }
                    }
                }
                Op::MulRows(a, v) => {
                    let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
                    for i in 0..rows {
                        let vi = self.nodes[v.0].values[i];
                        for j in 0..cols {
                            let gi = g[i * cols + j];
                            lower_g[a.0][i * cols + j] += gi * vi;
                            lower_g[v.0][i] += gi * self.nodes[a.0].values[i * cols + j];
                        }
                    }
                }
                Op::DivRows(a, v) => {
                    let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
                    for i in 0..rows {
                        let vi = self.nodes[v.0].values[i];
                        for j in 0..cols {
                            let gi = g[i * cols + j];
                            lower_g[a.0][i * cols + j] += gi / vi;
                            lower_g[v.0][i] -=
                                gi * self.nodes[a.0].values[i * cols + j] / (vi * vi);
                        }
                    }
                }
                Op::Exp(a) => {
                    let out = &self.nodes[id].values;
                    for i in 0..g.len() {
                        lower_g[a.0][i] += g[i] * out[i];
                    }
                }
                Op::Log(a) => {
                    for i in 0..g.len() {
                        lower_g[a.0][i] += g[i] / self.nodes[a.0].values[i];
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    for i in 0..g.len() {
                        let x = self.nodes[a.0].values[i];
                        if x >= lo && x <= hi {
                            lower_g[a.0][i] += g[i];
                        }
                    }
                }
                Op::LogClamped(a, lo, hi) => {
                    for i in 0..g.len() {
                        let x = self.nodes[a.0].values[i];
                        if x >= lo && x <= hi {
                            lower_g[a.0][i] += g[i] / x;
                        }
                    }
                }
                Op::Relu(a) => {
                    for i in 0..g.len() {
                        if self.nodes[a.0].values[i] > 0.0 {
                            lower_g[a.0][i] += g[i];
                        }
                    }
                }
                Op::Sqrt(a) => {
                    let out = &self.nodes[id].values;
                    for i in 0..g.len() {
                        lower_g[a.0][i] += g[i] / (2.0 * out[i]);
                    }
                }
                Op::LogSumExp(a) => {
                    let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
                    for i in 0..rows {
                        let lse = self.nodes[id].values[i];
                        for j in 0..cols {
                            let p = (self.nodes[a.0].values[i * cols + j] - lse).exp();
                            lower_g[a.0][i * cols + j] += g[i] * p;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
                    let p = &self.nodes[id].values;
                    for i in 0..rows {
                        let row = i * cols..(i + 1) * cols;
                        let dot: f64 =
                            g[row.clone()].iter().zip(&p[row.clone()]).map(|(x, y)| x * y).sum();
                        for j in 0..cols {
                            let idx = i * cols + j;
                            lower_g[a.0][idx] += p[idx] * (g[idx] - dot);
                        }
                    }
                }
                Op::PNorm(a, p) => {
                    let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
                    for i in 0..rows {
                        let norm = self.nodes[id].values[i];
                        if norm == 0.0 {
                            continue;
                        }
                        for j in 0..cols {
                            let x = self.nodes[a.0].values[i * cols + j];
                            if x == 0.0 {
                                continue;
                            }
                            let d = x.signum() * x.abs().powf(p - 1.0) * norm.powf(1.0 - p);
                            lower_g[a.0][i * cols + j] += g[i] * d;
                        }
                    }
                }
                Op::RowSum(a) => {
                    let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
                    for i in 0..rows {
                        for j in 0..cols {
                            lower_g[a.0][i * cols + j] += g[i];
                        }
                    }
                }
                Op::SumAll(a) => {
                    for ga in lower_g[a.0].iter_mut() {
                        *ga += g[0];
                    }
                }
                Op::Reshape(a) => {
                    for (ga, &gi) in lower_g[a.0].iter_mut().zip(g) {
                        *ga += gi;
                    }
                }
                // Stop-gradient: input id recorded for topology, receives nothing.
                Op::Detach(a) => {
                    let _ = a;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn elementwise_arithmetic() {
        let mut t = Tape::new();
        let a = t.vector(vec![1.0, 2.0]);
        let b = t.vector(vec![3.0, 4.0]);
        let s = t.add(a, b).unwrap();
        assert_eq!(t.values(s), &[4.0, 6.0]);

        let m = t.vector(vec![2.0, 3.0]);
        let z = t.vector(vec![0.0, 1.0]);
        let p = t.mul(m, z).unwrap();
        assert_eq!(t.values(p), &[0.0, 3.0]);

        let ones = t.vector(vec![1.0, 1.0]);
        let zeroed = t.scale(ones, 0.0);
        assert_eq!(t.values(zeroed), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.vector(vec![1.0, 2.0]);
        let b = t.vector(vec![1.0, 2.0, 3.0]);
        match t.sub(a, b) {
            Err(Error::ShapeMismatch { left, right }) => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_identity_and_row_column() {
        let mut t = Tape::new();
        let eye = t.matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = t.matmul(eye, m).unwrap();
        assert_eq!(t.values(out), &[1.0, 2.0, 3.0, 4.0]);

        let row = t.matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let col = t.matrix(2, 1, vec![5.0, 7.0]).unwrap();
        let dot = t.matmul(row, col).unwrap();
        assert_eq!(t.values(dot), &[5.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Independent reference product, written against plain slices.
        fn oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[i * k + p] * b[p * n + j];
                    }
                    c[i * n + j] = s;
                }
            }
            c
        }
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let a: Vec<f64> = (0..12).map(|_| next()).collect();
        let b: Vec<f64> = (0..8).map(|_| next()).collect();
        let expect = oracle(&a, &b, 3, 4, 2);

        let mut t = Tape::new();
        let av = t.matrix(3, 4, a).unwrap();
        let bv = t.matrix(4, 2, b).unwrap();
        let cv = t.matmul(av, bv).unwrap();
        for (got, want) in t.values(cv).iter().zip(&expect) {
            assert!(close(*got, *want, 1e-12));
        }
    }

    #[test]
    fn exp_log_relu_basics() {
        let mut t = Tape::new();
        let z = t.vector(vec![0.0]);
        let e = t.exp(z);
        assert_eq!(t.values(e), &[1.0]);

        let x = t.vector(vec![1.5]);
        let ex = t.exp(x);
        let back = t.log(ex).unwrap();
        assert!(close(t.values(back)[0], 1.5, 1e-12));

        let r = t.vector(vec![-2.0, 0.0, 3.0]);
        let relu = t.relu(r);
        assert_eq!(t.values(relu), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn log_rejects_non_positive_naming_index() {
        let mut t = Tape::new();
        let x = t.vector(vec![1.0, -0.5, 2.0]);
        match t.log(x) {
            Err(Error::LogDomain { index, value }) => {
                assert_eq!(index, 1);
                assert_eq!(value, -0.5);
            }
            other => panic!("expected log domain error, got {other:?}"),
        }
    }

    #[test]
    fn logsumexp_symmetric_shifted_and_derived() {
        let mut t = Tape::new();
        let z = t.vector(vec![0.0, 0.0]);
        let l = t.logsumexp(z);
        assert!(close(t.values(l)[0], std::f64::consts::LN_2, 1e-15));

        let big = t.vector(vec![1000.0, 1000.0]);
        let lb = t.logsumexp(big);
        assert!(close(t.values(lb)[0], 1000.0 + std::f64::consts::LN_2, 1e-12));

        let x = t.vector(vec![3.0, 4.0]);
        let lx = t.logsumexp(x);
        // Extended-precision log(e^3 + e^4).
        assert!(close(t.values(lx)[0], 4.313261687518223, 1e-6));
    }

    #[test]
    fn softmax_uniform_and_two_to_one() {
        let mut t = Tape::new();
        let z = t.vector(vec![0.0, 0.0, 0.0]);
        let s = t.softmax(z);
        for &p in t.values(s) {
            assert!(close(p, 1.0 / 3.0, 1e-15));
        }
        let x = t.vector(vec![std::f64::consts::LN_2, 0.0]);
        let sx = t.softmax(x);
        assert!(close(t.values(sx)[0], 2.0 / 3.0, 1e-15));
        assert!(close(t.values(sx)[1], 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn p_norm_triangle_and_order_check() {
        let mut t = Tape::new();
        let x = t.vector(vec![3.0, 4.0]);
        let n2 = t.p_norm(x, 2.0).unwrap();
        assert!(close(t.values(n2)[0], 5.0, 1e-12));

        let ones = t.vector(vec![1.0, 1.0, 1.0, 1.0]);
        let n1 = t.p_norm(ones, 1.0).unwrap();
        assert!(close(t.values(n1)[0], 4.0, 1e-12));

        assert!(matches!(t.p_norm(x, 0.5), Err(Error::NormOrder(_))));
    }

    #[test]
    fn detach_is_value_transparent_with_zero_gradient() {
        let mut t = Tape::new();
        let x = t.vector(vec![0.3, -1.2, 2.5]);
        let d = t.detach(x);
        assert_eq!(t.values(d), t.values(x));

        let s = t.sum(d);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn detach_product_rule_keeps_one_factor_constant() {
        // d/dx sum(detach(x) * x) = detach(x) = x values, not 2x.
        let mut t = Tape::new();
        let x = t.vector(vec![0.7, -0.4, 1.9]);
        let d = t.detach(x);
        let prod = t.mul(d, x).unwrap();
        let loss = t.sum(prod);
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        for (gi, xi) in g.iter().zip([0.7, -0.4, 1.9]) {
            assert!(close(*gi, xi, 1e-15));
        }
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::new();
        let x = t.vector(vec![1.0, 2.0, 3.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.vector(vec![1.0, 2.0]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.vector(vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.vector(vec![1.0, 2.0]);
        let orphan = t.vector(vec![5.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(orphan).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut t = Tape::new();
        let x = t.vector(vec![0.3, 1.7, -2.2, 0.9]);
        let sm = t.softmax(x);
        let lg = t.log_clamped(sm, 1e-12, 1.0);
        let prod = t.mul(sm, lg).unwrap();
        let sum = t.sum(prod);
        let loss = t.scale(sum, -1.0);

        t.backward(loss).unwrap();
        let first: Vec<f64> = t.grad(x).unwrap().to_vec();
        t.backward(loss).unwrap();
        let second: Vec<f64> = t.grad(x).unwrap().to_vec();
        assert_eq!(
            first.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            second.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        );
    }
}
