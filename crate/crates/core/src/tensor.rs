//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Every forward op appends one node to a [`Tape`]; nodes only reference
//! earlier nodes, so the node list is already in topological order and
//! [`Tape::backward`] is a single reverse sweep. Values are row-major. Ops
//! that act "per row" treat the last dimension as the row length.

use crate::error::{Error, Result};

/// Epsilon added to the population variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044_715;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel]).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Rows and columns when the tensor is viewed as a matrix whose row
    /// length is the last dimension.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("non-empty shape");
        (self.data.len() / cols, cols)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        grad.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
        Ok(())
    }

    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    // Masked columns have zero output, so the backward pass needs no mask.
    Softmax {
        x: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Concat(Vec<Var>),
    Row {
        x: Var,
        index: usize,
    },
    MaskedMean {
        x: Var,
        keep: Vec<bool>,
        count: usize,
    },
    Sum(Var),
    Index {
        x: Var,
        index: usize,
    },
    NegLogClamp {
        x: Var,
        floor: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Gather { .. } => "gather",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Concat(..) => "concat",
            Op::Row { .. } => "row",
            Op::MaskedMean { .. } => "masked_mean",
            Op::Sum(..) => "sum",
            Op::Index { .. } => "index",
            Op::NegLogClamp { .. } => "neg_log_clamp",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records forward ops in evaluation order and replays them backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×n] · b[k×n]ᵀ`
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`
fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Numerically stable softmax over a slice, skipping entries whose `keep`
/// flag is false (they receive probability exactly 0).
fn softmax_row(x: &[f64], keep: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    let max = x
        .iter()
        .enumerate()
        .filter(|&(j, _)| kept(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Input("softmax over a fully masked row".into()));
    }
    let mut total = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        *o = if kept(j) { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(())
}

/// Softmax of a plain vector of logits, outside any tape.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Input("softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_row(logits, None, &mut out)?;
    Ok(out)
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an input or parameter. Any gradient buffer carried by the
    /// tensor is dropped; gradients live on the tape until read back.
    pub fn leaf(&mut self, mut value: Tensor) -> Result<Var> {
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Adjoint of `v` computed by the most recent [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let out = matmul_raw(&av.data, &bv.data, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(mismatch("add", av, bv));
        }
        let out = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let shape = av.shape.clone();
        self.push(Tensor::new(shape, out)?, Op::Add(a, b))
    }

    /// Adds a row vector `b[n]` to every row of `a[.., n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (_, cols) = av.rows_cols();
        if bv.numel() != cols {
            return Err(mismatch("add_row", av, bv));
        }
        let out = av
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data[i % cols])
            .collect();
        let shape = av.shape.clone();
        self.push(Tensor::new(shape, out)?, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(mismatch("mul", av, bv));
        }
        let out = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let shape = av.shape.clone();
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let av = self.value(a);
        let out = av.data.iter().map(|x| x * factor).collect();
        let shape = av.shape.clone();
        self.push(Tensor::new(shape, out)?, Op::Scale(a, factor))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "transpose expects a matrix, got {:?}",
                av.shape
            )));
        }
        let (r, c) = (av.shape[0], av.shape[1]);
        let out = transpose_raw(&av.data, r, c);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != av.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: av.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor::new(shape.to_vec(), av.data.clone())?;
        self.push(t, Op::Reshape(a))
    }

    /// Elementwise GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.data.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = av.shape.clone();
        self.push(Tensor::new(shape, out)?, Op::Gelu(a))
    }

    /// Per-row layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, d) = xv.rows_cols();
        if gv.numel() != d {
            return Err(mismatch("layer_norm", xv, gv));
        }
        if bv.numel() != d {
            return Err(mismatch("layer_norm", xv, bv));
        }
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data[j] + bv.data[j];
            }
        }
        let shape = xv.shape.clone();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last dimension where columns with `keep[j] == false`
    /// are excluded, as if their score were −∞.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        self.softmax_impl(x, Some(keep.to_vec()))
    }

    fn softmax_impl(&mut self, x: Var, keep: Option<Vec<bool>>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.rows_cols();
        if let Some(k) = &keep {
            if k.len() != cols {
                return Err(Error::Dimension {
                    op: "masked_softmax",
                    lhs: xv.shape.clone(),
                    rhs: vec![k.len()],
                });
            }
        }
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            softmax_row(
                &xv.data[r * cols..(r + 1) * cols],
                keep.as_deref(),
                &mut out[r * cols..(r + 1) * cols],
            )?;
        }
        let shape = xv.shape.clone();
        self.push(Tensor::new(shape, out)?, Op::Softmax { x })
    }

    /// Row lookup `table[ids[i]]`, the embedding op.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape.len() != 2 {
            return Err(Error::Contract("gather expects a 2-D table".into()));
        }
        let (rows, d) = (tv.shape[0], tv.shape[1]);
        if ids.is_empty() {
            return Err(Error::Input("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "gather index {bad} out of range for table with {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv.data[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.rows_cols();
        if len == 0 || start + len > rows {
            return Err(Error::Input(format!(
                "slice_rows {start}..{} out of range for {rows} rows",
                start + len
            )));
        }
        let out = xv.data[start * cols..(start + len) * cols].to_vec();
        self.push(
            Tensor::new(vec![len, cols], out)?,
            Op::SliceRows { x, start },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.rows_cols();
        if width == 0 || start + width > cols {
            return Err(Error::Input(format!(
                "slice_cols {start}..{} out of range for {cols} columns",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv.data[r * cols + start..r * cols + start + width]);
        }
        self.push(
            Tensor::new(vec![rows, width], out)?,
            Op::SliceCols { x, start },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let (rows, _) = self.value(*first).rows_cols();
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if r != rows {
                return Err(mismatch("concat_cols", self.value(*first), self.value(p)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                let (_, c) = pv.rows_cols();
                out.extend_from_slice(&pv.data[r * c..(r + 1) * c]);
            }
        }
        self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// Flattens and joins the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat of nothing".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(&self.value(p).data);
        }
        self.push(Tensor::vector(out)?, Op::Concat(parts.to_vec()))
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.rows_cols();
        if index >= rows {
            return Err(Error::Input(format!(
                "row {index} out of range for {rows} rows"
            )));
        }
        let out = xv.data[index * cols..(index + 1) * cols].to_vec();
        self.push(Tensor::vector(out)?, Op::Row { x, index })
    }

    /// Mean of the rows whose `keep` flag is set.
    pub fn masked_mean_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.rows_cols();
        if keep.len() != rows {
            return Err(Error::Dimension {
                op: "masked_mean_rows",
                lhs: xv.shape.clone(),
                rhs: vec![keep.len()],
            });
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::Input("mean pooling over an all-zero mask".into()));
        }
        let mut out = vec![0.0; cols];
        for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            for (o, v) in out.iter_mut().zip(&xv.data[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= count as f64);
        self.push(
            Tensor::vector(out)?,
            Op::MaskedMean {
                x,
                keep: keep.to_vec(),
                count,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        let v = *xv.data.get(index).ok_or_else(|| {
            Error::Input(format!("index {index} out of range for {:?}", xv.shape))
        })?;
        self.push(Tensor::scalar(v), Op::Index { x, index })
    }

    /// Elementwise `−ln(max(x, floor))`.
    pub fn neg_log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.data.iter().map(|&v| -(v.max(floor)).ln()).collect();
        let shape = xv.shape.clone();
        self.push(Tensor::new(shape, out)?, Op::NegLogClamp { x, floor })
    }

    /// Reverse sweep from a scalar `loss`. Adjoints from any earlier sweep
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at {} node {i}",
                    self.nodes[i].op.name()
                )));
            }
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Split borrow: node values are read while adjoints of earlier nodes
        // are written.
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |v: Var| &nodes[v.0].value;
        let mut updates: Vec<(Var, Vec<f64>)> = Vec::with_capacity(2);

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                updates.push((*a, matmul_a_bt(g, &bv.data, m, n, k)));
                updates.push((*b, matmul_at_b(&av.data, g, m, k, n)));
            }
            Op::Add(a, b) => {
                updates.push((*a, g.to_vec()));
                updates.push((*b, g.to_vec()));
            }
            Op::AddRow(a, b) => {
                let cols = val(*b).numel();
                let mut gb = vec![0.0; cols];
                for (j, gv) in g.iter().enumerate() {
                    gb[j % cols] += gv;
                }
                updates.push((*a, g.to_vec()));
                updates.push((*b, gb));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                updates.push((*a, g.iter().zip(&bv.data).map(|(x, y)| x * y).collect()));
                updates.push((*b, g.iter().zip(&av.data).map(|(x, y)| x * y).collect()));
            }
            Op::Scale(a, f) => updates.push((*a, g.iter().map(|x| x * f).collect())),
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape[0], node.value.shape[1]);
                updates.push((*a, transpose_raw(g, r, c)));
            }
            Op::Reshape(a) => updates.push((*a, g.to_vec())),
            Op::Gelu(a) => {
                let av = val(*a);
                let d = av
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| gelu_derivative(x) * gv)
                    .collect();
                updates.push((*a, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let d = gv.numel();
                let rows = xhat.len() / d;
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gv.data[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv.data[j];
                        dx[r * d + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                updates.push((*x, dx));
                updates.push((*gain, dgain));
                updates.push((*bias, dbias));
            }
            Op::Softmax { x, .. } => {
                let y = &node.value;
                let (rows, cols) = y.rows_cols();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..rows {
                    let yr = &y.data[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                updates.push((*x, dx));
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let d = tv.shape[1];
                let mut dt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                updates.push((*table, dt));
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let (_, cols) = xv.rows_cols();
                let mut dx = vec![0.0; xv.numel()];
                dx[start * cols..start * cols + g.len()].copy_from_slice(g);
                updates.push((*x, dx));
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (rows, cols) = xv.rows_cols();
                let width = node.value.shape[1];
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                updates.push((*x, dx));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = val(p).rows_cols();
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    updates.push((p, dp));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    updates.push((p, g[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::Row { x, index } => {
                let xv = val(*x);
                let (_, cols) = xv.rows_cols();
                let mut dx = vec![0.0; xv.numel()];
                dx[index * cols..(index + 1) * cols].copy_from_slice(g);
                updates.push((*x, dx));
            }
            Op::MaskedMean { x, keep, count } => {
                let xv = val(*x);
                let (_, cols) = xv.rows_cols();
                let mut dx = vec![0.0; xv.numel()];
                for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
                    for j in 0..cols {
                        dx[r * cols + j] = g[j] / *count as f64;
                    }
                }
                updates.push((*x, dx));
            }
            Op::Sum(x) => updates.push((*x, vec![g[0]; val(*x).numel()])),
            Op::Index { x, index } => {
                let mut dx = vec![0.0; val(*x).numel()];
                dx[*index] = g[0];
                updates.push((*x, dx));
            }
            Op::NegLogClamp { x, floor } => {
                let d = val(*x)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| if v > *floor { -gv / v } else { 0.0 })
                    .collect();
                updates.push((*x, d));
            }
        }

        for (v, d) in updates {
            self.accumulate(v, d);
        }
        Ok(())
    }
}
