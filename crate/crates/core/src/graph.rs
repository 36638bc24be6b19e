//! Reverse-mode differentiation over a recorded operation graph.
//!
//! A `Graph` records every forward operation of one loss evaluation and
//! replays them in reverse to accumulate exact derivatives. Graphs are
//! single-threaded and short-lived: one per training step or evaluation.
//! Every forward op validates shapes and rejects non-finite outputs.
//!
//! All tensors are treated as logical 2-D (rank-1 values act as row
//! vectors); scalars are 1x1.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::error::{HslError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul, Tensor};

/// Handle to a node in one graph. Only valid for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Exp { x: Var },
    Ln { x: Var },
    Sqrt { x: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var },
    Transpose { x: Var },
    ConcatRows { xs: Vec<Var> },
    ConcatCols { xs: Vec<Var> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    SoftmaxRows { x: Var, mask: Option<Vec<bool>> },
    MeanAxis0 { x: Var, mask: Option<Vec<bool>> },
    MeanAll { x: Var },
    Dot { a: Var, b: Var },
    L2NormRows { x: Var },
    L2NormalizeRows { x: Var },
    LogSumExpRows { x: Var },
    Diag { x: Var },
    Embed { table: Var, ids: Vec<usize> },
    LayerNormRows { x: Var, gamma: Var, beta: Var, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-parameter derivatives of one scalar loss.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }

    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf: participates in forward only.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf. Registering the same parameter twice yields the same
    /// node, so gradients from every use accumulate together.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.tensor(id), Op::Leaf, true);
        self.param_vars.insert(id, v);
        v
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(HslError::NonFinite { op: op_name });
        }
        Ok(self.push(value, op, needs_grad))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---- binary elementwise -------------------------------------------------

    fn check_same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(HslError::ShapeMismatch {
                op,
                detail: format!("({ra},{ca}) vs ({rb},{cb})"),
            });
        }
        Ok((ra, ca))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.check_same_dims("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.emit("add", Tensor::new(vec![r, c], data)?, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.check_same_dims("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.emit("sub", Tensor::new(vec![r, c], data)?, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.check_same_dims("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.emit("mul", Tensor::new(vec![r, c], data)?, Op::Mul { a, b }, needs)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.check_same_dims("div", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.emit("div", Tensor::new(vec![r, c], data)?, Op::Div { a, b }, needs)
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(HslError::ShapeMismatch {
                op: "matmul",
                detail: format!("({m},{k}) x ({k2},{n})"),
            });
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.emit("matmul", Tensor::new(vec![m, n], data)?, Op::MatMul { a, b }, needs)
    }

    /// Add a length-c bias vector to every row of a (r,c) matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(bias).numel() != c {
            return Err(HslError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias has {} entries, matrix has {c} columns", self.value(bias).numel()),
            });
        }
        let bv = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.emit("add_bias", Tensor::new(vec![r, c], data)?, Op::AddBias { x, bias }, needs)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xv = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv[i * c + j];
            }
        }
        let needs = self.needs(x);
        self.emit("transpose", Tensor::new(vec![c, r], data)?, Op::Transpose { x }, needs)
    }

    // ---- unary maps ----------------------------------------------------------

    fn unary(
        &mut self,
        op_name: &'static str,
        x: Var,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let needs = self.needs(x);
        self.emit(op_name, Tensor::new(vec![r, c], data)?, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu { x }, |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid { x }, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Op::Tanh { x }, f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp { x }, f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, Op::Ln { x }, f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, Op::Sqrt { x }, f64::sqrt)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, Op::Scale { x, c }, |v| v * c)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_const", x, Op::AddConst { x }, |v| v + c)
    }

    // ---- structure -----------------------------------------------------------

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(HslError::ShapeMismatch {
                op: "concat_rows",
                detail: "empty input list".into(),
            });
        }
        let (_, c) = self.dims(xs[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (r, cx) = self.dims(x);
            if cx != c {
                return Err(HslError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {c} vs {cx}"),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        self.emit(
            "concat_rows",
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows { xs: xs.to_vec() },
            needs,
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(HslError::ShapeMismatch {
                op: "concat_cols",
                detail: "empty input list".into(),
            });
        }
        let (r, _) = self.dims(xs[0]);
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (rx, cx) = self.dims(x);
            if rx != r {
                return Err(HslError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {r} vs {rx}"),
                });
            }
            widths.push(cx);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let xv = self.value(x).data();
            for i in 0..r {
                data[i * total + offset..i * total + offset + w].copy_from_slice(&xv[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        self.emit(
            "concat_cols",
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols { xs: xs.to_vec() },
            needs,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(HslError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {start}..{} out of {r}", start + len),
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(x);
        self.emit(
            "slice_rows",
            Tensor::new(vec![len, c], data)?,
            Op::SliceRows { x, start },
            needs,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(HslError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols {start}..{} out of {c}", start + len),
            });
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(x);
        self.emit(
            "slice_cols",
            Tensor::new(vec![r, len], data)?,
            Op::SliceCols { x, start },
            needs,
        )
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r != c {
            return Err(HslError::ShapeMismatch {
                op: "diag",
                detail: format!("expected square matrix, got ({r},{c})"),
            });
        }
        let xv = self.value(x).data();
        let data = (0..r).map(|i| xv[i * c + i]).collect();
        let needs = self.needs(x);
        self.emit("diag", Tensor::new(vec![r, 1], data)?, Op::Diag { x }, needs)
    }

    /// Row lookup into an embedding table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(HslError::ShapeMismatch {
                op: "embed",
                detail: format!("id {bad} out of vocabulary range {vocab}"),
            });
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        self.emit(
            "embed",
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    // ---- reductions ------------------------------------------------------------

    /// Row-wise softmax. An optional column mask zeroes masked positions;
    /// with a full-true mask the arithmetic is identical to the unmasked path.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(m) = mask {
            if m.len() != c {
                return Err(HslError::ShapeMismatch {
                    op: "softmax_rows",
                    detail: format!("mask length {} vs {c} columns", m.len()),
                });
            }
            if !m.iter().any(|&k| k) {
                return Err(HslError::AllMasked {
                    op: "softmax_rows",
                    row: 0,
                });
            }
        }
        let keep = |j: usize| mask.map_or(true, |m| m[j]);
        let xv = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if keep(j) && row[j] > max {
                    max = row[j];
                }
            }
            let mut sum = 0.0;
            for j in 0..c {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    data[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let needs = self.needs(x);
        self.emit(
            "softmax_rows",
            Tensor::new(vec![r, c], data)?,
            Op::SoftmaxRows {
                x,
                mask: mask.map(|m| m.to_vec()),
            },
            needs,
        )
    }

    /// Mean over rows, producing a (1,c) row. An optional row mask restricts
    /// the mean to the kept rows.
    pub fn mean_axis0(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(m) = mask {
            if m.len() != r {
                return Err(HslError::ShapeMismatch {
                    op: "mean_axis0",
                    detail: format!("mask length {} vs {r} rows", m.len()),
                });
            }
        }
        let kept = mask.map_or(r, |m| m.iter().filter(|&&k| k).count());
        if kept == 0 {
            return Err(HslError::AllMasked {
                op: "mean_axis0",
                row: 0,
            });
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; c];
        for i in 0..r {
            if mask.map_or(true, |m| m[i]) {
                for j in 0..c {
                    data[j] += xv[i * c + j];
                }
            }
        }
        for v in &mut data {
            *v /= kept as f64;
        }
        let needs = self.needs(x);
        self.emit(
            "mean_axis0",
            Tensor::new(vec![1, c], data)?,
            Op::MeanAxis0 {
                x,
                mask: mask.map(|m| m.to_vec()),
            },
            needs,
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let mean = self.value(x).data().iter().sum::<f64>() / n as f64;
        let needs = self.needs(x);
        self.emit("mean_all", Tensor::scalar(mean), Op::MeanAll { x }, needs)
    }

    /// Full contraction of two same-shape tensors into a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_dims("dot", a, b)?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        let needs = self.needs(a) || self.needs(b);
        self.emit("dot", Tensor::scalar(s), Op::Dot { a, b }, needs)
    }

    /// Euclidean norm of each row, as a column vector.
    pub fn l2_norm_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xv = self.value(x).data();
        let data = (0..r)
            .map(|i| xv[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let needs = self.needs(x);
        self.emit(
            "l2_norm_rows",
            Tensor::new(vec![r, 1], data)?,
            Op::L2NormRows { x },
            needs,
        )
    }

    /// Scale every row to unit Euclidean norm. Zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xv = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(HslError::NonFinite {
                    op: "l2_normalize_rows",
                });
            }
            for j in 0..c {
                data[i * c + j] = row[j] / norm;
            }
        }
        let needs = self.needs(x);
        self.emit(
            "l2_normalize_rows",
            Tensor::new(vec![r, c], data)?,
            Op::L2NormalizeRows { x },
            needs,
        )
    }

    /// Row-wise log(sum(exp(x))), stabilized by max subtraction.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xv = self.value(x).data();
        let data = (0..r)
            .map(|i| {
                let row = &xv[i * c..(i + 1) * c];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            })
            .collect();
        let needs = self.needs(x);
        self.emit(
            "logsumexp_rows",
            Tensor::new(vec![r, 1], data)?,
            Op::LogSumExpRows { x },
            needs,
        )
    }

    /// Per-row layer normalization with learned gain and shift.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(HslError::ShapeMismatch {
                op: "layer_norm_rows",
                detail: format!(
                    "gamma/beta have {}/{} entries, matrix has {c} columns",
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            });
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.emit(
            "layer_norm_rows",
            Tensor::new(vec![r, c], data)?,
            Op::LayerNormRows { x, gamma, beta, eps },
            needs,
        )
    }

    // ---- backward ---------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Returns the derivative for every
    /// registered parameter (zero tensors for parameters the loss does not reach).
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(HslError::LossNotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads)?;
            // Leaves keep their gradient for collection below.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }

        let mut out = Gradients::default();
        for (&pid, &var) in &self.param_vars {
            let shape = store.entry(pid).shape.clone();
            let numel: usize = shape.iter().product();
            let data = grads[var.0].take().unwrap_or_else(|| vec![0.0; numel]);
            out.map.insert(pid, Tensor::new(shape, data)?);
        }
        Ok(out)
    }

    fn accumulate(
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        numel: usize,
        contribution: impl Fn(usize) -> f64,
    ) -> Result<()> {
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; numel]);
        for (i, g) in slot.iter_mut().enumerate() {
            let v = contribution(i);
            if !v.is_finite() {
                return Err(HslError::NonFinite { op: "backward" });
            }
            *g += v;
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, gout.len(), |i| gout[i])?;
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, gout.len(), |i| gout[i])?;
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, gout.len(), |i| gout[i])?;
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, gout.len(), |i| -gout[i])?;
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    Self::accumulate(grads, *a, gout.len(), |i| gout[i] * bv[i])?;
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, gout.len(), |i| gout[i] * av[i])?;
                }
            }
            Op::Div { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    Self::accumulate(grads, *a, gout.len(), |i| gout[i] / bv[i])?;
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, gout.len(), |i| -gout[i] * av[i] / (bv[i] * bv[i]))?;
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.needs(*a) {
                    // dA = dOut . B^T
                    let bv = self.value(*b).data();
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bv[p * n + j];
                        }
                    }
                    let da = matmul(gout, &bt, m, n, k);
                    Self::accumulate(grads, *a, m * k, |i| da[i])?;
                }
                if self.needs(*b) {
                    // dB = A^T . dOut
                    let av = self.value(*a).data();
                    let mut at = vec![0.0; k * m];
                    for i in 0..m {
                        for p in 0..k {
                            at[p * m + i] = av[i * k + p];
                        }
                    }
                    let db = matmul(&at, gout, k, m, n);
                    Self::accumulate(grads, *b, k * n, |i| db[i])?;
                }
            }
            Op::AddBias { x, bias } => {
                let (r, c) = self.dims(*x);
                if self.needs(*x) {
                    Self::accumulate(grads, *x, r * c, |i| gout[i])?;
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += gout[i * c + j];
                        }
                    }
                    Self::accumulate(grads, *bias, c, |i| db[i])?;
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                Self::accumulate(grads, *x, gout.len(), |i| {
                    if xv[i] > 0.0 {
                        gout[i]
                    } else {
                        0.0
                    }
                })?;
            }
            Op::Sigmoid { x } => {
                let yv = node.value.data();
                Self::accumulate(grads, *x, gout.len(), |i| gout[i] * yv[i] * (1.0 - yv[i]))?;
            }
            Op::Tanh { x } => {
                let yv = node.value.data();
                Self::accumulate(grads, *x, gout.len(), |i| gout[i] * (1.0 - yv[i] * yv[i]))?;
            }
            Op::Exp { x } => {
                let yv = node.value.data();
                Self::accumulate(grads, *x, gout.len(), |i| gout[i] * yv[i])?;
            }
            Op::Ln { x } => {
                let xv = self.value(*x).data();
                Self::accumulate(grads, *x, gout.len(), |i| gout[i] / xv[i])?;
            }
            Op::Sqrt { x } => {
                let yv = node.value.data();
                Self::accumulate(grads, *x, gout.len(), |i| gout[i] / (2.0 * yv[i]))?;
            }
            Op::Scale { x, c } => {
                Self::accumulate(grads, *x, gout.len(), |i| gout[i] * c)?;
            }
            Op::AddConst { x } => {
                Self::accumulate(grads, *x, gout.len(), |i| gout[i])?;
            }
            Op::Transpose { x } => {
                let (r, c) = self.dims(*x);
                // gout is (c,r); route entry (j,i) back to (i,j).
                Self::accumulate(grads, *x, r * c, |i| {
                    let (row, col) = (i / c, i % c);
                    gout[col * r + row]
                })?;
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for &x in xs {
                    let (r, c) = self.dims(x);
                    let take = r * c;
                    if self.needs(x) {
                        let base = offset;
                        Self::accumulate(grads, x, take, |i| gout[base + i])?;
                    }
                    offset += take;
                }
            }
            Op::ConcatCols { xs } => {
                let (r, total) = self.dims(Var(idx));
                let mut offset = 0;
                for &x in xs {
                    let (_, w) = self.dims(x);
                    if self.needs(x) {
                        let base = offset;
                        Self::accumulate(grads, x, r * w, |i| {
                            let (row, col) = (i / w, i % w);
                            gout[row * total + base + col]
                        })?;
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let (_, c) = self.dims(*x);
                let (r_out, _) = self.dims(Var(idx));
                let (r_in, _) = self.dims(*x);
                let lo = start * c;
                let hi = (start + r_out) * c;
                Self::accumulate(grads, *x, r_in * c, |i| {
                    if i >= lo && i < hi {
                        gout[i - lo]
                    } else {
                        0.0
                    }
                })?;
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims(*x);
                let (_, w) = self.dims(Var(idx));
                Self::accumulate(grads, *x, r * c, |i| {
                    let (row, col) = (i / c, i % c);
                    if col >= *start && col < start + w {
                        gout[row * w + (col - start)]
                    } else {
                        0.0
                    }
                })?;
            }
            Op::SoftmaxRows { x, mask } => {
                let (r, c) = self.dims(*x);
                let yv = node.value.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += gout[i * c + j] * yv[i * c + j];
                    }
                    for j in 0..c {
                        if mask.as_ref().map_or(true, |m| m[j]) {
                            dx[i * c + j] = yv[i * c + j] * (gout[i * c + j] - dot);
                        }
                    }
                }
                Self::accumulate(grads, *x, r * c, |i| dx[i])?;
            }
            Op::MeanAxis0 { x, mask } => {
                let (r, c) = self.dims(*x);
                let kept = mask
                    .as_ref()
                    .map_or(r, |m| m.iter().filter(|&&k| k).count()) as f64;
                Self::accumulate(grads, *x, r * c, |i| {
                    let row = i / c;
                    if mask.as_ref().map_or(true, |m| m[row]) {
                        gout[i % c] / kept
                    } else {
                        0.0
                    }
                })?;
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).numel();
                let g = gout[0] / n as f64;
                Self::accumulate(grads, *x, n, |_| g)?;
            }
            Op::Dot { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let g = gout[0];
                if self.needs(*a) {
                    Self::accumulate(grads, *a, av.len(), |i| g * bv[i])?;
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, bv.len(), |i| g * av[i])?;
                }
            }
            Op::L2NormRows { x } => {
                let (r, c) = self.dims(*x);
                let xv = self.value(*x).data();
                let norms = node.value.data();
                Self::accumulate(grads, *x, r * c, |i| {
                    let row = i / c;
                    gout[row] * xv[i] / norms[row]
                })?;
            }
            Op::L2NormalizeRows { x } => {
                let (r, c) = self.dims(*x);
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let norm = xv[i * c..(i + 1) * c]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += gout[i * c + j] * yv[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = (gout[i * c + j] - yv[i * c + j] * dot) / norm;
                    }
                }
                Self::accumulate(grads, *x, r * c, |i| dx[i])?;
            }
            Op::LogSumExpRows { x } => {
                let (r, c) = self.dims(*x);
                let xv = self.value(*x).data();
                let lse = node.value.data();
                Self::accumulate(grads, *x, r * c, |i| {
                    let row = i / c;
                    gout[row] * (xv[i] - lse[row]).exp()
                })?;
            }
            Op::Diag { x } => {
                let (n, _) = self.dims(*x);
                Self::accumulate(grads, *x, n * n, |i| {
                    let (row, col) = (i / n, i % n);
                    if row == col {
                        gout[row]
                    } else {
                        0.0
                    }
                })?;
            }
            Op::Embed { table, ids } => {
                let (vocab, d) = self.dims(*table);
                let mut dt = vec![0.0; vocab * d];
                for (pos, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gout[pos * d + j];
                    }
                }
                Self::accumulate(grads, *table, vocab * d, |i| dt[i])?;
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let (r, c) = self.dims(*x);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let g = gout[i * c + j];
                        dbeta[j] += g;
                        dgamma[j] += g * xhat[j];
                        let dxh = g * gv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for j in 0..c {
                        let dxh = gout[i * c + j] * gv[j];
                        dx[i * c + j] = inv_std * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                if self.needs(*x) {
                    Self::accumulate(grads, *x, r * c, |i| dx[i])?;
                }
                if self.needs(*gamma) {
                    Self::accumulate(grads, *gamma, c, |i| dgamma[i])?;
                }
                if self.needs(*beta) {
                    Self::accumulate(grads, *beta, c, |i| dbeta[i])?;
                }
            }
        }
        Ok(())
    }
}
