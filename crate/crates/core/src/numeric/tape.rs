//! Reverse-mode gradient recording.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Tape::backward`] walks the record in reverse and
//! returns the gradient of a scalar output with respect to every parameter
//! that was loaded onto the tape. A tape belongs to a single thread; data
//! parallel training builds one tape per sample and sums the resulting
//! [`Gradients`] in a fixed order.

use std::collections::BTreeMap;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Additive logit used for masked positions. Finite so that fully masked
/// rows cannot produce NaN; `exp(MASK_NEG - max)` underflows to exactly 0.
pub const MASK_NEG: f64 = -1e9;

const LN_EPS: f64 = 1e-5;
const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "none" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::Config(format!("unknown nonlinearity {other}"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        };
        f.write_str(s)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleCols(Var, Var),
    ScaleRows(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Softmax(Var),
    LayerNorm(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var, Vec<usize>),
    // per-column argmax row
    MaxRows(Var, Vec<usize>),
    RowSum(Var),
    Sum(Var),
    SumSquares(Var),
    CrossEntropy(Var, Vec<usize>),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::ScaleCols(..) => "scale_cols",
            Op::ScaleRows(..) => "scale_rows",
            Op::ScaleBy(..) => "scale_by",
            Op::Scale(..) => "scale",
            Op::Act(..) => "activation",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::MaxRows(..) => "max_rows",
            Op::RowSum(_) => "row_sum",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    // per-op scratch needed by the backward pass (layer-norm inverse stds)
    cache: Vec<f64>,
}

/// Recording context. See the module docs.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enable or disable the non-finite check applied to every op output.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, cache: Vec<f64>) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op.name()
            )));
        }
        self.nodes.push(Node { value, op, cache });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            cache: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Load a parameter. Loading the same parameter twice returns the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            cache: Vec::new(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return shape_err("matmul", format!("{m}x{k} * {k2}x{n}"));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), Vec::new())
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), Vec::new())
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return shape_err(op, format!("{da:?} vs {db:?}"));
        }
        Ok(da)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (m, n) = self.same_dims(op.name(), a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(Tensor::matrix(m, n, out)?, op, Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(bias) != (1, n) {
            return shape_err("add_bias", format!("{m}x{n} + {:?}", self.dims(bias)));
        }
        let b = self.value(bias).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % n])
            .collect();
        self.push(Tensor::matrix(m, n, out)?, Op::AddBias(a, bias), Vec::new())
    }

    /// `out[i][j] = a[i][j] * row[j]` with `row` of shape `1 x n`.
    pub fn scale_cols(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return shape_err("scale_cols", format!("{m}x{n} by {:?}", self.dims(row)));
        }
        let r = self.value(row).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * r[i % n])
            .collect();
        self.push(Tensor::matrix(m, n, out)?, Op::ScaleCols(a, row), Vec::new())
    }

    /// `out[i][j] = a[i][j] * col[i]` with `col` of shape `m x 1`.
    pub fn scale_rows(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(col) != (m, 1) {
            return shape_err("scale_rows", format!("{m}x{n} by {:?}", self.dims(col)));
        }
        let c = self.value(col).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * c[i / n.max(1)])
            .collect();
        self.push(Tensor::matrix(m, n, out)?, Op::ScaleRows(a, col), Vec::new())
    }

    /// Multiplies `a` by the `1 x 1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err("scale_by", format!("scalar expected, got {:?}", self.dims(s)));
        }
        let (m, n) = self.dims(a);
        let k = self.scalar(s);
        let out = self.value(a).data().iter().map(|x| x * k).collect();
        self.push(Tensor::matrix(m, n, out)?, Op::ScaleBy(a, s), Vec::new())
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let (m, n) = self.dims(a);
        let out = self.value(a).data().iter().map(|x| x * k).collect();
        self.push(Tensor::matrix(m, n, out)?, Op::Scale(a, k), Vec::new())
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        if act == Activation::Identity {
            return Ok(a);
        }
        let (m, n) = self.dims(a);
        let out = self.value(a).data().iter().map(|x| act.apply(*x)).collect();
        self.push(Tensor::matrix(m, n, out)?, Op::Act(a, act), Vec::new())
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Softplus)
    }

    /// Row-wise softmax. `mask`, when given, is an additive logit tensor of
    /// the same shape whose entries are `0` (keep) or `-inf`/[`MASK_NEG`]
    /// (drop).
    pub fn softmax(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (m, n) = self.dims(a);
        let mut z = self.value(a).data().to_vec();
        if let Some(mask) = mask {
            if mask.dims() != (m, n) {
                return shape_err("softmax", format!("mask {:?} vs {m}x{n}", mask.dims()));
            }
            for (zi, mi) in z.iter_mut().zip(mask.data()) {
                if *mi == 0.0 {
                    continue;
                }
                if *mi > 0.0 || mi.is_nan() {
                    return invalid("softmax mask entries must be 0 or -inf");
                }
                *zi += mi.max(MASK_NEG);
            }
        }
        for row in z.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        self.push(Tensor::matrix(m, n, z)?, Op::Softmax(a), Vec::new())
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if n == 0 {
            return shape_err("layer_norm", "zero-width rows");
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        let mut inv = Vec::with_capacity(m);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * s;
            }
            inv.push(s);
        }
        self.push(Tensor::matrix(m, n, out)?, Op::LayerNorm(a), inv)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > n {
            return shape_err("slice_cols", format!("[{start}, {}) of {n}", start + len));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(Tensor::matrix(m, len, out)?, Op::SliceCols(a, start), Vec::new())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return invalid("concat_cols of nothing");
        };
        let m = self.dims(*first).0;
        if parts.iter().any(|p| self.dims(*p).0 != m) {
            return shape_err("concat_cols", "row counts differ");
        }
        let total: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        self.push(
            Tensor::matrix(m, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            Vec::new(),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return invalid("concat_rows of nothing");
        };
        let n = self.dims(*first).1;
        if parts.iter().any(|p| self.dims(*p).1 != n) {
            return shape_err("concat_rows", "column counts differ");
        }
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
            m += self.dims(*p).0;
        }
        self.push(
            Tensor::matrix(m, n, out)?,
            Op::ConcatRows(parts.to_vec()),
            Vec::new(),
        )
    }

    /// Row lookup (embedding lookup when `a` is an embedding table).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(bad) = rows.iter().find(|r| **r >= m) {
            return shape_err("gather_rows", format!("row {bad} of {m}"));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for r in rows {
            out.extend_from_slice(self.value(a).row_slice(*r));
        }
        self.push(
            Tensor::matrix(rows.len(), n, out)?,
            Op::GatherRows(a, rows.to_vec()),
            Vec::new(),
        )
    }

    /// Mean of the listed rows, as a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if rows.is_empty() {
            return invalid("mean over an empty row subset");
        }
        if let Some(bad) = rows.iter().find(|r| **r >= m) {
            return shape_err("mean_rows", format!("row {bad} of {m}"));
        }
        let mut out = vec![0.0; n];
        for r in rows {
            for (o, v) in out.iter_mut().zip(self.value(a).row_slice(*r)) {
                *o += v;
            }
        }
        let k = rows.len() as f64;
        out.iter_mut().for_each(|o| *o /= k);
        self.push(
            Tensor::matrix(1, n, out)?,
            Op::MeanRows(a, rows.to_vec()),
            Vec::new(),
        )
    }

    pub fn mean_all_rows(&mut self, a: Var) -> Result<Var> {
        let rows: Vec<usize> = (0..self.dims(a).0).collect();
        self.mean_rows(a, &rows)
    }

    /// Column-wise maximum over all rows, as a `1 x n` row. Ties go to the
    /// first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m == 0 {
            return invalid("max over zero rows");
        }
        let t = self.value(a);
        let arg: Vec<usize> = (0..n)
            .map(|j| (1..m).fold(0, |best, i| if t.get(i, j) > t.get(best, j) { i } else { best }))
            .collect();
        let out = arg.iter().enumerate().map(|(j, i)| t.get(*i, j)).collect();
        self.push(Tensor::matrix(1, n, out)?, Op::MaxRows(a, arg), Vec::new())
    }

    /// `m x n -> m x 1` row sums.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let out = self
            .value(a)
            .data()
            .chunks(n.max(1))
            .map(|r| r.iter().sum())
            .collect();
        self.push(Tensor::matrix(m, 1, out)?, Op::RowSum(a), Vec::new())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), Vec::new())
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a), Vec::new())
    }

    /// Summed negative log-likelihood of `targets` under row distributions `probs`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(probs);
        if targets.len() != m {
            return shape_err("cross_entropy", format!("{} targets for {m} rows", targets.len()));
        }
        if let Some(bad) = targets.iter().find(|t| **t >= n) {
            return invalid(format!("target class {bad} out of range for {n} classes"));
        }
        let p = self.value(probs);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, t)| -p.get(r, *t).max(PROB_FLOOR).ln())
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(probs, targets.to_vec()),
            Vec::new(),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(a), Vec::new())
    }

    /// Sum of scalar vars.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let Some((first, rest)) = parts.split_first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut acc = *first;
        for p in rest {
            acc = self.add(acc, *p)?;
        }
        Ok(acc)
    }

    /// Gradients of the scalar `loss` with respect to every loaded parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let (m, n) = node.value.dims();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let shape = self.nodes[idx].value.shape().to_vec();
                    out.insert(*id, Tensor::new(shape, g)?);
                }
                Op::MatMul(a, b) => {
                    let (_, k) = self.dims(*a);
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    acc(&mut grads, *a, matmul_nt(&g, bv, m, n, k));
                    acc(&mut grads, *b, matmul_tn(av, &g, m, k, n));
                }
                Op::Transpose(a) => {
                    let mut t = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            t[j * m + i] = g[i * n + j];
                        }
                    }
                    acc(&mut grads, *a, t);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.iter().map(|x| -x).collect());
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    acc(&mut grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    acc(&mut grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
                Op::AddBias(a, bias) => {
                    let mut gb = vec![0.0; n];
                    for (i, x) in g.iter().enumerate() {
                        gb[i % n] += x;
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g);
                }
                Op::ScaleCols(a, row) => {
                    let av = self.value(*a).data();
                    let rv = self.value(*row).data();
                    let mut gr = vec![0.0; n];
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m * n {
                        gr[i % n] += g[i] * av[i];
                        ga[i] = g[i] * rv[i % n];
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::ScaleRows(a, col) => {
                    let av = self.value(*a).data();
                    let cv = self.value(*col).data();
                    let mut gc = vec![0.0; m];
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m * n {
                        gc[i / n] += g[i] * av[i];
                        ga[i] = g[i] * cv[i / n];
                    }
                    acc(&mut grads, *col, gc);
                    acc(&mut grads, *a, ga);
                }
                Op::ScaleBy(a, s) => {
                    let av = self.value(*a).data();
                    let k = self.scalar(*s);
                    let gs: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                    acc(&mut grads, *s, vec![gs]);
                    acc(&mut grads, *a, g.iter().map(|x| x * k).collect());
                }
                Op::Scale(a, k) => {
                    acc(&mut grads, *a, g.iter().map(|x| x * k).collect());
                }
                Op::Act(a, act) => {
                    let xv = self.value(*a).data();
                    let yv = node.value.data();
                    let ga = g
                        .iter()
                        .zip(xv.iter().zip(yv))
                        .map(|(gi, (x, y))| gi * act.derivative(*x, *y))
                        .collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(p, q)| p * q).sum();
                        for j in r {
                            ga[j] = y[j] * (g[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm(a) => {
                    let xhat = node.value.data();
                    let inv = &node.cache;
                    let nf = n as f64;
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let sg: f64 = g[r.clone()].iter().sum();
                        let sgx: f64 = g[r.clone()].iter().zip(&xhat[r.clone()]).map(|(p, q)| p * q).sum();
                        for j in r {
                            ga[j] = inv[i] / nf * (nf * g[j] - sg - xhat[j] * sgx);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (am, an) = self.dims(*a);
                    let mut ga = vec![0.0; am * an];
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * an + start + j] = g[i * n + j];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pn = self.dims(*p).1;
                        let mut gp = Vec::with_capacity(m * pn);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * n + offset..i * n + offset + pn]);
                        }
                        acc(&mut grads, *p, gp);
                        offset += pn;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        acc(&mut grads, *p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::MaxRows(a, arg) => {
                    let (am, an) = self.dims(*a);
                    let mut ga = vec![0.0; am * an];
                    for (j, i) in arg.iter().enumerate() {
                        ga[i * an + j] += g[j];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let (am, an) = self.dims(*a);
                    let mut ga = vec![0.0; am * an];
                    for (k, r) in rows.iter().enumerate() {
                        for j in 0..an {
                            ga[r * an + j] += g[k * an + j];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a, rows) => {
                    let (am, an) = self.dims(*a);
                    let k = rows.len() as f64;
                    let mut ga = vec![0.0; am * an];
                    for r in rows {
                        for j in 0..an {
                            ga[r * an + j] += g[j] / k;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let an = self.dims(*a).1;
                    let ga = (0..m * an).map(|i| g[i / an]).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    acc(&mut grads, *a, vec![g[0]; len]);
                }
                Op::SumSquares(a) => {
                    let ga = self.value(*a).data().iter().map(|x| 2.0 * x * g[0]).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::CrossEntropy(p, targets) => {
                    let pv = self.value(*p);
                    let (pm, pn) = pv.dims();
                    let mut ga = vec![0.0; pm * pn];
                    for (r, t) in targets.iter().enumerate() {
                        ga[r * pn + t] = -g[0] / pv.get(r, *t).max(PROB_FLOOR);
                    }
                    acc(&mut grads, *p, ga);
                }
                Op::Reshape(a) => acc(&mut grads, *a, g),
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

/// Parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(existing) => existing.add_assign(&g),
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }

    /// Adds these gradients into the `grad` slots of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.grads {
            store.get_mut(*id).grad.add_assign(g);
        }
    }
}

/// Runs `backward` and writes the gradients into `store`.
pub fn backward_into(tape: &Tape, loss: Var, store: &mut ParamStore) -> Result<()> {
    let grads = tape.backward(loss)?;
    grads.accumulate_into(store);
    Ok(())
}
