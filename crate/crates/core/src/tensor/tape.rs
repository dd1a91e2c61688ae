//! Define-by-run recording of primitive tensor operations with exact adjoints.

use std::cell::RefCell;

use super::{Gradients, ParamId, ParamSet, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Matmul(ValueId, ValueId),
    Transpose(ValueId),
    Add(ValueId, ValueId),
    AddRow(ValueId, ValueId),
    AddScalar(ValueId),
    Mul(ValueId, ValueId),
    MulRow(ValueId, ValueId),
    Scale(ValueId, f64),
    Tanh(ValueId),
    Relu(ValueId),
    Log(ValueId),
    Softmax(ValueId),
    LayerNorm(ValueId),
    Gather { table: ValueId, indices: Vec<usize> },
    RowSelect { src: ValueId, cols: Vec<usize> },
    MaskedMeanPool { src: ValueId, mask: Vec<f64> },
    Concat { parts: Vec<ValueId>, axis: usize },
    Slice { src: ValueId, axis: usize, start: usize, end: usize },
    Sum(ValueId),
    Mean(ValueId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-threaded record of a forward computation. Dropping the tape frees
/// all intermediates; gradients are extracted with [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> ValueId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        ValueId(nodes.len() - 1)
    }

    /// Clone out the value behind `id`.
    pub fn value(&self, id: ValueId) -> Tensor {
        self.nodes.borrow()[id.0].value.clone()
    }

    /// Scalar value behind `id`; panics if it has more than one element.
    pub fn scalar(&self, id: ValueId) -> f64 {
        self.nodes.borrow()[id.0].value.item()
    }

    pub fn with_value<R>(&self, id: ValueId, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id.0].value)
    }

    /// Record a constant input.
    pub fn leaf(&self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Record a trainable parameter; its gradient is reported by `backward`.
    pub fn param(&self, params: &ParamSet, id: ParamId) -> ValueId {
        self.push(params.get(id).clone(), Op::Leaf { param: Some(id) })
    }

    /// Copy a value out as a fresh constant leaf, cutting the gradient path.
    pub fn detach(&self, src: ValueId) -> ValueId {
        let value = self.value(src);
        self.leaf(value)
    }

    pub fn matmul(&self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (value, _) = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let tb = &nodes[b.0].value;
            let (m, k) = dims2("matmul", ta)?;
            let (kb, n) = dims2("matmul", tb)?;
            if k != kb {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; m * n];
            mm_nn(ta.data(), m, k, tb.data(), n, &mut out);
            (Tensor::new(vec![m, n], out)?, ())
        };
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn transpose(&self, a: ValueId) -> Result<ValueId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (m, n) = dims2("transpose", ta)?;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = ta.data()[i * n + j];
                }
            }
            Tensor::new(vec![n, m], out)?
        };
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn add(&self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let value = self.zip_same_shape("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `[m, n] + [n]`, the bias pattern: `row` is broadcast over every row.
    pub fn add_row(&self, a: ValueId, row: ValueId) -> Result<ValueId, TensorError> {
        let value = self.zip_row_broadcast("add_row", a, row, |x, y| x + y)?;
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn add_scalar(&self, a: ValueId, c: f64) -> Result<ValueId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let data = ta.data().iter().map(|v| v + c).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::AddScalar(a)))
    }

    pub fn mul(&self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let value = self.zip_same_shape("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `[m, n] * [n]` with the row factor broadcast over every row.
    pub fn mul_row(&self, a: ValueId, row: ValueId) -> Result<ValueId, TensorError> {
        let value = self.zip_row_broadcast("mul_row", a, row, |x, y| x * y)?;
        Ok(self.push(value, Op::MulRow(a, row)))
    }

    pub fn scale(&self, a: ValueId, c: f64) -> Result<ValueId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let data = ta.data().iter().map(|v| v * c).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::Scale(a, c)))
    }

    /// `a - b`, composed from `scale` and `add`.
    pub fn sub(&self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn tanh(&self, a: ValueId) -> Result<ValueId, TensorError> {
        let value = self.map_unary(a, f64::tanh)?;
        Ok(self.push(value, Op::Tanh(a)))
    }

    pub fn relu(&self, a: ValueId) -> Result<ValueId, TensorError> {
        let value = self.map_unary(a, |v| if v > 0.0 { v } else { 0.0 })?;
        Ok(self.push(value, Op::Relu(a)))
    }

    pub fn log(&self, a: ValueId) -> Result<ValueId, TensorError> {
        let value = self.map_unary(a, f64::ln)?;
        Ok(self.push(value, Op::Log(a)))
    }

    /// Row-wise softmax (last axis). Rank-1 input is treated as one row.
    pub fn softmax(&self, a: ValueId) -> Result<ValueId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (rows, cols) = ta.rows_cols();
            if cols == 0 {
                return Err(TensorError::UnsupportedShape {
                    op: "softmax",
                    shape: ta.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let x = &ta.data()[r * cols..(r + 1) * cols];
                let y = &mut out[r * cols..(r + 1) * cols];
                let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (yi, &xi) in y.iter_mut().zip(x) {
                    *yi = (xi - max).exp();
                    z += *yi;
                }
                for yi in y.iter_mut() {
                    *yi /= z;
                }
            }
            Tensor::new(ta.shape().to_vec(), out)?
        };
        Ok(self.push(value, Op::Softmax(a)))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part;
    /// compose with `mul_row`/`add_row` for learned gain and bias).
    pub fn layer_norm(&self, a: ValueId) -> Result<ValueId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (rows, cols) = ta.rows_cols();
            if cols == 0 {
                return Err(TensorError::UnsupportedShape {
                    op: "layer_norm",
                    shape: ta.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let x = &ta.data()[r * cols..(r + 1) * cols];
                let y = &mut out[r * cols..(r + 1) * cols];
                let (mean, var) = row_moments(x);
                let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for (yi, &xi) in y.iter_mut().zip(x) {
                    *yi = (xi - mean) * inv_std;
                }
            }
            Tensor::new(ta.shape().to_vec(), out)?
        };
        Ok(self.push(value, Op::LayerNorm(a)))
    }

    /// Row gather: `out[t] = table[indices[t]]`.
    pub fn gather(&self, table: ValueId, indices: &[usize]) -> Result<ValueId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let tt = &nodes[table.0].value;
            let (rows, cols) = dims2("gather", tt)?;
            let mut out = Vec::with_capacity(indices.len() * cols);
            for &ix in indices {
                if ix >= rows {
                    return Err(TensorError::IndexOutOfBounds {
                        op: "gather",
                        index: ix,
                        size: rows,
                    });
                }
                out.extend_from_slice(&tt.data()[ix * cols..(ix + 1) * cols]);
            }
            Tensor::new(vec![indices.len(), cols], out)?
        };
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Per-row element pick: `out[t] = src[t, cols[t]]`.
    pub fn row_select(&self, src: ValueId, cols: &[usize]) -> Result<ValueId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let ts = &nodes[src.0].value;
            let (rows, width) = dims2("row_select", ts)?;
            if cols.len() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "row_select",
                    lhs: ts.shape().to_vec(),
                    rhs: vec![cols.len()],
                });
            }
            let mut out = Vec::with_capacity(rows);
            for (t, &c) in cols.iter().enumerate() {
                if c >= width {
                    return Err(TensorError::IndexOutOfBounds {
                        op: "row_select",
                        index: c,
                        size: width,
                    });
                }
                out.push(ts.data()[t * width + c]);
            }
            Tensor::vector(out)
        };
        Ok(self.push(
            value,
            Op::RowSelect {
                src,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Mean over the rows of `src` selected by a nonzero mask entry,
    /// weighting every selected row equally: `out = Σ_t mask[t]·src[t] / Σ_t mask[t]`.
    pub fn masked_mean_pool(&self, src: ValueId, mask: &[f64]) -> Result<ValueId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let ts = &nodes[src.0].value;
            let (rows, cols) = dims2("masked_mean_pool", ts)?;
            if mask.len() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_mean_pool",
                    lhs: ts.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            let total: f64 = mask.iter().sum();
            if total == 0.0 {
                return Err(TensorError::EmptyMask);
            }
            let mut out = vec![0.0; cols];
            for (t, &w) in mask.iter().enumerate() {
                if w != 0.0 {
                    let row = &ts.data()[t * cols..(t + 1) * cols];
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += w * v;
                    }
                }
            }
            for o in &mut out {
                *o /= total;
            }
            Tensor::new(vec![1, cols], out)?
        };
        Ok(self.push(
            value,
            Op::MaskedMeanPool {
                src,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Concatenate rank-2 tensors along `axis` (0 = stack rows, 1 = widen).
    pub fn concat(&self, parts: &[ValueId], axis: usize) -> Result<ValueId, TensorError> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::UnsupportedShape {
                op: "concat",
                shape: vec![parts.len(), axis],
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            let (r0, c0) = dims2("concat", first)?;
            if axis == 0 {
                let mut rows = 0;
                let mut out = Vec::new();
                for p in parts {
                    let t = &nodes[p.0].value;
                    let (r, c) = dims2("concat", t)?;
                    if c != c0 {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            lhs: first.shape().to_vec(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                    rows += r;
                    out.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, c0], out)?
            } else {
                let mut cols = 0;
                for p in parts {
                    let t = &nodes[p.0].value;
                    let (r, c) = dims2("concat", t)?;
                    if r != r0 {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            lhs: first.shape().to_vec(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                    cols += c;
                }
                let mut out = vec![0.0; r0 * cols];
                let mut offset = 0;
                for p in parts {
                    let t = &nodes[p.0].value;
                    let (_, c) = dims2("concat", t)?;
                    for r in 0..r0 {
                        out[r * cols + offset..r * cols + offset + c]
                            .copy_from_slice(&t.data()[r * c..(r + 1) * c]);
                    }
                    offset += c;
                }
                Tensor::new(vec![r0, cols], out)?
            }
        };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous range along `axis` (0 = rows, 1 = columns) of a rank-2 tensor.
    pub fn slice(
        &self,
        src: ValueId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<ValueId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let ts = &nodes[src.0].value;
            let (rows, cols) = dims2("slice", ts)?;
            let dim = if axis == 0 { rows } else { cols };
            if axis > 1 || start > end || end > dim {
                return Err(TensorError::IndexOutOfBounds {
                    op: "slice",
                    index: end,
                    size: dim,
                });
            }
            if axis == 0 {
                let out = ts.data()[start * cols..end * cols].to_vec();
                Tensor::new(vec![end - start, cols], out)?
            } else {
                let width = end - start;
                let mut out = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    out.extend_from_slice(&ts.data()[r * cols + start..r * cols + end]);
                }
                Tensor::new(vec![rows, width], out)?
            }
        };
        Ok(self.push(value, Op::Slice { src, axis, start, end }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, a: ValueId) -> Result<ValueId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[a.0].value.data().iter().sum())
        };
        Ok(self.push(value, Op::Sum(a)))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self, a: ValueId) -> Result<ValueId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.is_empty() {
                return Err(TensorError::UnsupportedShape {
                    op: "mean",
                    shape: t.shape().to_vec(),
                });
            }
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        };
        Ok(self.push(value, Op::Mean(a)))
    }

    /// Reverse sweep from a scalar `loss`, producing one gradient tensor per
    /// parameter in `params` (zeros for parameters the loss never touched).
    pub fn backward(&self, loss: ValueId, params: &ParamSet) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0].value;
        if !loss_node.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.shape().to_vec(),
            });
        }
        if !loss_node.item().is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }

        let mut adjoints: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Tensor::filled(loss_node.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf { .. } => {
                    // Park the adjoint back; parameter gradients are collected below.
                    adjoints[idx] = Some(grad);
                }
                Op::Matmul(a, b) => {
                    let ta = &nodes[a.0].value;
                    let tb = &nodes[b.0].value;
                    let (m, k) = ta.rows_cols();
                    let (_, n) = tb.rows_cols();
                    {
                        let ga = acc_entry(&mut adjoints, *a, ta.shape());
                        mm_nt(grad.data(), m, n, tb.data(), k, ga.data_mut());
                    }
                    {
                        let gb = acc_entry(&mut adjoints, *b, tb.shape());
                        mm_tn(ta.data(), m, k, grad.data(), n, gb.data_mut());
                    }
                }
                Op::Transpose(a) => {
                    let ta = &nodes[a.0].value;
                    let (m, n) = ta.rows_cols();
                    let ga = acc_entry(&mut adjoints, *a, ta.shape());
                    for i in 0..m {
                        for j in 0..n {
                            ga.data_mut()[i * n + j] += grad.data()[j * m + i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc_entry(&mut adjoints, *a, grad.shape()), grad.data(), 1.0);
                    add_into(acc_entry(&mut adjoints, *b, grad.shape()), grad.data(), 1.0);
                }
                Op::AddRow(a, row) => {
                    add_into(acc_entry(&mut adjoints, *a, grad.shape()), grad.data(), 1.0);
                    let trow = &nodes[row.0].value;
                    let cols = trow.len();
                    let grow = acc_entry(&mut adjoints, *row, trow.shape());
                    for chunk in grad.data().chunks_exact(cols) {
                        for (g, &v) in grow.data_mut().iter_mut().zip(chunk) {
                            *g += v;
                        }
                    }
                }
                Op::AddScalar(a) => {
                    add_into(acc_entry(&mut adjoints, *a, grad.shape()), grad.data(), 1.0);
                }
                Op::Mul(a, b) => {
                    let tb = nodes[b.0].value.clone();
                    let ta = nodes[a.0].value.clone();
                    {
                        let ga = acc_entry(&mut adjoints, *a, ta.shape());
                        for ((g, &d), &v) in
                            ga.data_mut().iter_mut().zip(grad.data()).zip(tb.data())
                        {
                            *g += d * v;
                        }
                    }
                    {
                        let gb = acc_entry(&mut adjoints, *b, tb.shape());
                        for ((g, &d), &v) in
                            gb.data_mut().iter_mut().zip(grad.data()).zip(ta.data())
                        {
                            *g += d * v;
                        }
                    }
                }
                Op::MulRow(a, row) => {
                    let ta = nodes[a.0].value.clone();
                    let trow = nodes[row.0].value.clone();
                    let cols = trow.len();
                    {
                        let ga = acc_entry(&mut adjoints, *a, ta.shape());
                        for (gchunk, dchunk) in ga
                            .data_mut()
                            .chunks_exact_mut(cols)
                            .zip(grad.data().chunks_exact(cols))
                        {
                            for ((g, &d), &w) in gchunk.iter_mut().zip(dchunk).zip(trow.data()) {
                                *g += d * w;
                            }
                        }
                    }
                    {
                        let grow = acc_entry(&mut adjoints, *row, trow.shape());
                        for (achunk, dchunk) in ta
                            .data()
                            .chunks_exact(cols)
                            .zip(grad.data().chunks_exact(cols))
                        {
                            for ((g, &d), &v) in grow.data_mut().iter_mut().zip(dchunk).zip(achunk)
                            {
                                *g += d * v;
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    add_into(acc_entry(&mut adjoints, *a, grad.shape()), grad.data(), *c);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = acc_entry(&mut adjoints, *a, y.shape());
                    for ((g, &d), &yv) in ga.data_mut().iter_mut().zip(grad.data()).zip(y.data()) {
                        *g += d * (1.0 - yv * yv);
                    }
                }
                Op::Relu(a) => {
                    let x = &nodes[a.0].value;
                    let ga = acc_entry(&mut adjoints, *a, x.shape());
                    for ((g, &d), &xv) in ga.data_mut().iter_mut().zip(grad.data()).zip(x.data()) {
                        if xv > 0.0 {
                            *g += d;
                        }
                    }
                }
                Op::Log(a) => {
                    let x = &nodes[a.0].value;
                    let ga = acc_entry(&mut adjoints, *a, x.shape());
                    for ((g, &d), &xv) in ga.data_mut().iter_mut().zip(grad.data()).zip(x.data()) {
                        *g += d / xv;
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let (rows, cols) = y.rows_cols();
                    let ga = acc_entry(&mut adjoints, *a, y.shape());
                    for r in 0..rows {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let dr = &grad.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(dr).map(|(&yv, &dv)| yv * dv).sum();
                        let gr = &mut ga.data_mut()[r * cols..(r + 1) * cols];
                        for ((g, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += yv * (dv - dot);
                        }
                    }
                }
                Op::LayerNorm(a) => {
                    let x = &nodes[a.0].value;
                    let y = &node.value;
                    let (rows, cols) = x.rows_cols();
                    let ga = acc_entry(&mut adjoints, *a, x.shape());
                    for r in 0..rows {
                        let xr = &x.data()[r * cols..(r + 1) * cols];
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let dr = &grad.data()[r * cols..(r + 1) * cols];
                        let (_, var) = row_moments(xr);
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let n = cols as f64;
                        let mean_d: f64 = dr.iter().sum::<f64>() / n;
                        let mean_dy: f64 =
                            dr.iter().zip(yr).map(|(&dv, &yv)| dv * yv).sum::<f64>() / n;
                        let gr = &mut ga.data_mut()[r * cols..(r + 1) * cols];
                        for ((g, &dv), &yv) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += inv_std * (dv - mean_d - yv * mean_dy);
                        }
                    }
                }
                Op::Gather { table, indices } => {
                    let tt = &nodes[table.0].value;
                    let (_, cols) = tt.rows_cols();
                    let gt = acc_entry(&mut adjoints, *table, tt.shape());
                    for (t, &ix) in indices.iter().enumerate() {
                        let drow = &grad.data()[t * cols..(t + 1) * cols];
                        let grow = &mut gt.data_mut()[ix * cols..(ix + 1) * cols];
                        for (g, &d) in grow.iter_mut().zip(drow) {
                            *g += d;
                        }
                    }
                }
                Op::RowSelect { src, cols } => {
                    let ts = &nodes[src.0].value;
                    let (_, width) = ts.rows_cols();
                    let gs = acc_entry(&mut adjoints, *src, ts.shape());
                    for (t, &c) in cols.iter().enumerate() {
                        gs.data_mut()[t * width + c] += grad.data()[t];
                    }
                }
                Op::MaskedMeanPool { src, mask } => {
                    let ts = &nodes[src.0].value;
                    let (_, cols) = ts.rows_cols();
                    let total: f64 = mask.iter().sum();
                    let gs = acc_entry(&mut adjoints, *src, ts.shape());
                    for (t, &w) in mask.iter().enumerate() {
                        if w != 0.0 {
                            let grow = &mut gs.data_mut()[t * cols..(t + 1) * cols];
                            for (g, &d) in grow.iter_mut().zip(grad.data()) {
                                *g += d * w / total;
                            }
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    if *axis == 0 {
                        let mut row_offset = 0;
                        for p in parts {
                            let tp = &nodes[p.0].value;
                            let (r, c) = tp.rows_cols();
                            let gp = acc_entry(&mut adjoints, *p, tp.shape());
                            let src = &grad.data()[row_offset * c..(row_offset + r) * c];
                            add_into_slice(gp.data_mut(), src, 1.0);
                            row_offset += r;
                        }
                    } else {
                        let (rows, total_cols) = node.value.rows_cols();
                        let mut col_offset = 0;
                        for p in parts {
                            let tp = &nodes[p.0].value;
                            let (_, c) = tp.rows_cols();
                            let gp = acc_entry(&mut adjoints, *p, tp.shape());
                            for r in 0..rows {
                                let src =
                                    &grad.data()[r * total_cols + col_offset..r * total_cols + col_offset + c];
                                let dst = &mut gp.data_mut()[r * c..(r + 1) * c];
                                for (g, &d) in dst.iter_mut().zip(src) {
                                    *g += d;
                                }
                            }
                            col_offset += c;
                        }
                    }
                }
                Op::Slice { src, axis, start, end } => {
                    let ts = &nodes[src.0].value;
                    let (rows, cols) = ts.rows_cols();
                    let gs = acc_entry(&mut adjoints, *src, ts.shape());
                    if *axis == 0 {
                        let dst = &mut gs.data_mut()[start * cols..end * cols];
                        for (g, &d) in dst.iter_mut().zip(grad.data()) {
                            *g += d;
                        }
                    } else {
                        let width = end - start;
                        for r in 0..rows {
                            let drow = &grad.data()[r * width..(r + 1) * width];
                            let grow = &mut gs.data_mut()[r * cols + start..r * cols + end];
                            for (g, &d) in grow.iter_mut().zip(drow) {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let ta = &nodes[a.0].value;
                    let d = grad.item();
                    let ga = acc_entry(&mut adjoints, *a, ta.shape());
                    for g in ga.data_mut() {
                        *g += d;
                    }
                }
                Op::Mean(a) => {
                    let ta = &nodes[a.0].value;
                    let d = grad.item() / ta.len() as f64;
                    let ga = acc_entry(&mut adjoints, *a, ta.shape());
                    for g in ga.data_mut() {
                        *g += d;
                    }
                }
            }
        }

        let mut grads = Gradients::zeros_like(params);
        for (idx, node) in nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(adj) = &adjoints[idx] {
                    add_into(grads.get_mut(pid), adj.data(), 1.0);
                }
            }
        }
        if !grads.all_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        Ok(grads)
    }

    fn map_unary(&self, a: ValueId, f: impl Fn(f64) -> f64) -> Result<Tensor, TensorError> {
        let nodes = self.nodes.borrow();
        let ta = &nodes[a.0].value;
        let data = ta.data().iter().map(|&v| f(v)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn zip_same_shape(
        &self,
        op: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let nodes = self.nodes.borrow();
        let ta = &nodes[a.0].value;
        let tb = &nodes[b.0].value;
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn zip_row_broadcast(
        &self,
        op: &'static str,
        a: ValueId,
        row: ValueId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let nodes = self.nodes.borrow();
        let ta = &nodes[a.0].value;
        let trow = &nodes[row.0].value;
        let (_, cols) = ta.rows_cols();
        if trow.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: trow.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(ta.len());
        for chunk in ta.data().chunks_exact(cols) {
            for (&x, &y) in chunk.iter().zip(trow.data()) {
                data.push(f(x, y));
            }
        }
        Tensor::new(ta.shape().to_vec(), data)
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::UnsupportedShape {
            op,
            shape: t.shape().to_vec(),
        }),
    }
}

fn row_moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn acc_entry<'a>(
    adjoints: &'a mut [Option<Tensor>],
    id: ValueId,
    shape: &[usize],
) -> &'a mut Tensor {
    let slot = &mut adjoints[id.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    slot.as_mut().unwrap()
}

fn add_into(dst: &mut Tensor, src: &[f64], scale: f64) {
    add_into_slice(dst.data_mut(), src, scale);
}

fn add_into_slice(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// C += A[m,k] · B[k,n]
fn mm_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C += G[m,n] · Bᵀ where B is [k,n]; result is [m,k]. Used for dA.
fn mm_nt(g: &[f64], m: usize, n: usize, b: &[f64], k: usize, c: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (kk, cv) in crow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *cv += acc;
        }
    }
}

/// C += Aᵀ · G where A is [m,k] and G is [m,n]; result is [k,n]. Used for dB.
fn mm_tn(a: &[f64], m: usize, k: usize, g: &[f64], n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}
