//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends one node holding its output and a description of
//! how to route gradients back to its inputs. Inputs always precede outputs in
//! the node list, so walking it backwards is a reverse topological order.

use super::tensor::{conv1d, exp_clipped, same_shape, shape_err, sigmoid, Padding, Tensor, EXP_CLAMP};
use crate::error::{invalid, Error, Result};

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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: f64 },
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d { x: Var, w: Var, b: Option<Var>, padding: Padding },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ExpClipped(Var),
    Log { x: Var, floor: f64 },
    ClampMin { x: Var, min: f64 },
    Abs(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    BroadcastRows(Var),
    BroadcastCols(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zero-filled if `v` does not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        self.push(v, Op::Div(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let v = self.value(x).map(|t| scale * t + shift);
        self.push(v, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        self.push(v, Op::Transpose(x))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding) -> Result<Var> {
        let v = conv1d(self.value(x), self.value(w), b.map(|b| self.value(b)), padding)?;
        self.push(v, Op::Conv1d { x, w, b, padding })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|t| t.max(0.0));
        self.push(v, Op::Relu(x))
    }

    /// `exp(clamp(x, -10, 10))`.
    pub fn exp_clipped(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(exp_clipped);
        self.push(v, Op::ExpClipped(x))
    }

    /// `ln(max(x, floor))`.
    pub fn log(&mut self, x: Var, floor: f64) -> Result<Var> {
        let v = self.value(x).map(|t| t.max(floor).ln());
        self.push(v, Op::Log { x, floor })
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Result<Var> {
        let v = self.value(x).map(|t| t.max(min));
        self.push(v, Op::ClampMin { x, min })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::abs);
        self.push(v, Op::Abs(x))
    }

    /// Softmax along the last axis of a vector or matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).softmax_rows()?;
        self.push(v, Op::SoftmaxRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(v, Op::Mean(x))
    }

    /// Row sums of an `R × C` matrix, as a length-`R` vector.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, _) = t.dims2()?;
        let v = Tensor::vector((0..r).map(|i| t.row(i).iter().sum()).collect());
        self.push(v, Op::SumCols(x))
    }

    /// Column means of an `R × C` matrix, as a length-`C` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if r == 0 {
            return invalid("mean over zero rows");
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(Tensor::vector(out), Op::MeanRows(x))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Invalid("empty concat".into()))?;
        let (_, cols) = self.value(*first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            let (r, c) = t.dims2()?;
            if c != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let v = Tensor::matrix(rows, cols, data)?;
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Invalid("empty concat".into()))?;
        let (rows, _) = self.value(*first).dims2()?;
        let mut cols = 0;
        for p in parts {
            let t = self.value(*p);
            let (r, c) = t.dims2()?;
            if r != rows {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let v = Tensor::matrix(rows, cols, data)?;
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if start >= end || end > c {
            return invalid(format!("column slice {start}..{end} of shape {:?}", t.shape()));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let v = Tensor::matrix(r, end - start, data)?;
        self.push(v, Op::SliceCols { x, start })
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return invalid(format!("row {bad} out of range for shape {:?}", t.shape()));
        }
        let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let v = Tensor::matrix(idx.len(), c, data)?;
        self.push(v, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Repeats a length-`R` vector across `cols` columns: `out[r, c] = v[r]`.
    pub fn broadcast_rows(&mut self, v: Var, cols: usize) -> Result<Var> {
        let t = self.value(v);
        if t.rank() != 1 {
            return invalid(format!("broadcast_rows needs a vector, got {:?}", t.shape()));
        }
        let data = t.data().iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect();
        let out = Tensor::matrix(t.numel(), cols, data)?;
        self.push(out, Op::BroadcastRows(v))
    }

    /// Repeats a length-`C` vector down `rows` rows: `out[r, c] = v[c]`.
    pub fn broadcast_cols(&mut self, v: Var, rows: usize) -> Result<Var> {
        let t = self.value(v);
        if t.rank() != 1 {
            return invalid(format!("broadcast_cols needs a vector, got {:?}", t.shape()));
        }
        let data = t.data().repeat(rows);
        let out = Tensor::matrix(rows, t.numel(), data)?;
        self.push(out, Op::BroadcastCols(v))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push(v, Op::Reshape(x))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.numel() != 1 {
            return invalid(format!(
                "gradient requested for non-scalar output of shape {:?}",
                out.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, delta: Tensor| {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(vb, "mul", |g, y| g * y)?);
                acc(*b, g.zip_map(va, "mul", |g, x| g * x)?);
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                acc(*a, g.zip_map(vb, "div", |g, d| g / d)?);
                let gb = g
                    .zip_map(y, "div", |g, q| g * q)?
                    .zip_map(vb, "div", |gq, d| -gq / d)?;
                acc(*b, gb);
            }
            Op::Affine { x, scale } => acc(*x, g.map(|v| v * scale)),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(&vb.transpose()?)?);
                acc(*b, va.transpose()?.matmul(g)?);
            }
            Op::Transpose(x) => acc(*x, g.transpose()?),
            Op::Conv1d { x, w, b, padding } => {
                let (gx, gw, gb) = conv1d_backward(self.value(*x), self.value(*w), g, *padding)?;
                acc(*x, gx);
                acc(*w, gw);
                if let Some(b) = b {
                    acc(*b, gb);
                }
            }
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, "sigmoid", |g, s| g * s * (1.0 - s))?),
            Op::Tanh(x) => acc(*x, g.zip_map(y, "tanh", |g, t| g * (1.0 - t * t))?),
            Op::Relu(x) => {
                acc(*x, g.zip_map(self.value(*x), "relu", |g, v| if v > 0.0 { g } else { 0.0 })?)
            }
            Op::ExpClipped(x) => {
                let d = g
                    .zip_map(y, "exp", |g, e| g * e)?
                    .zip_map(self.value(*x), "exp", |d, v| if v.abs() <= EXP_CLAMP { d } else { 0.0 })?;
                acc(*x, d);
            }
            Op::Log { x, floor } => acc(
                *x,
                g.zip_map(self.value(*x), "log", |g, v| if v > *floor { g / v } else { 0.0 })?,
            ),
            Op::ClampMin { x, min } => acc(
                *x,
                g.zip_map(self.value(*x), "clamp", |g, v| if v > *min { g } else { 0.0 })?,
            ),
            Op::Abs(x) => acc(*x, g.zip_map(self.value(*x), "abs", |g, v| g * sign(v))?),
            Op::SoftmaxRows(x) => {
                let cols = *y.shape().last().unwrap();
                let mut d = g.clone();
                for (dr, yr) in d.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (dv, yv) in dr.iter_mut().zip(yr) {
                        *dv = yv * (*dv - dot);
                    }
                }
                acc(*x, d);
            }
            Op::Sum(x) => acc(*x, Tensor::filled(self.shape(*x), g.data()[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, Tensor::filled(self.shape(*x), g.data()[0] / n));
            }
            Op::SumCols(x) => {
                let (r, c) = self.value(*x).dims2()?;
                let data = (0..r).flat_map(|i| std::iter::repeat_n(g.data()[i], c)).collect();
                acc(*x, Tensor::matrix(r, c, data)?);
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(*x).dims2()?;
                let row: Vec<f64> = g.data().iter().map(|v| v / r as f64).collect();
                acc(*x, Tensor::matrix(r, c, row.repeat(r))?);
            }
            Op::ConcatRows(parts) => {
                let cols = y.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let (r, _) = self.value(*p).dims2()?;
                    let slice = g.data()[offset * cols..(offset + r) * cols].to_vec();
                    acc(*p, Tensor::matrix(r, cols, slice)?);
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, _) = y.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let (_, c) = self.value(*p).dims2()?;
                    let mut data = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        data.extend_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    acc(*p, Tensor::matrix(rows, c, data)?);
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2()?;
                let width = y.shape()[1];
                let mut d = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    d.data_mut()[i * c + start..i * c + start + width].copy_from_slice(g.row(i));
                }
                acc(*x, d);
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = self.value(*x).dims2()?;
                let mut d = Tensor::zeros(&[r, c]);
                for (k, &row) in idx.iter().enumerate() {
                    for (dv, gv) in d.data_mut()[row * c..(row + 1) * c].iter_mut().zip(g.row(k)) {
                        *dv += gv;
                    }
                }
                acc(*x, d);
            }
            Op::BroadcastRows(v) => {
                let (r, _) = y.dims2()?;
                acc(*v, Tensor::vector((0..r).map(|i| g.row(i).iter().sum()).collect()));
            }
            Op::BroadcastCols(v) => {
                let (r, c) = y.dims2()?;
                let mut d = vec![0.0; c];
                for i in 0..r {
                    for (dv, gv) in d.iter_mut().zip(g.row(i)) {
                        *dv += gv;
                    }
                }
                acc(*v, Tensor::vector(d));
            }
            Op::Reshape(x) => acc(*x, g.reshape(self.shape(*x).to_vec())?),
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn conv1d_backward(x: &Tensor, w: &Tensor, g: &Tensor, padding: Padding) -> Result<(Tensor, Tensor, Tensor)> {
    let (cin, len) = x.dims2()?;
    let (cout, out_len) = g.dims2()?;
    let k = w.shape()[2];
    if w.shape() != [cout, cin, k] {
        return Err(shape_err("conv1d backward", w, g));
    }
    let pl = padding.left(k) as isize;
    let mut gx = Tensor::zeros(&[cin, len]);
    let mut gw = Tensor::zeros(w.shape());
    let gb = Tensor::vector((0..cout).map(|co| g.row(co).iter().sum()).collect());
    for co in 0..cout {
        let grow = g.row(co);
        for ci in 0..cin {
            let xrow = x.row(ci);
            for kk in 0..k {
                let widx = (co * cin + ci) * k + kk;
                let wv = w.data()[widx];
                let mut gwv = 0.0;
                for (t, &gv) in grow.iter().enumerate().take(out_len) {
                    let src = t as isize + kk as isize - pl;
                    if src >= 0 && (src as usize) < len {
                        let s = src as usize;
                        gwv += gv * xrow[s];
                        gx.data_mut()[ci * len + s] += gv * wv;
                    }
                }
                gw.data_mut()[widx] += gwv;
            }
        }
    }
    same_shape("conv1d backward", &gx, x)?;
    Ok((gx, gw, gb))
}
