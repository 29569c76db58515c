use crate::error::{invalid, Error, Result};

/// Dense row-major `f64` array. Vectors have rank 1, matrices rank 2 and
/// convolution kernels rank 3 (`out × in × width`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Invalid(format!("shape {shape:?} overflows")))?;
        if numel != data.len() {
            return invalid(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a `rows × cols` matrix from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => invalid(format!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[row * c..(row + 1) * c]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        let (r, c) = (self.shape[0], self.shape[1]);
        (0..r).map(|i| self.data[i * c + col]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        same_shape(op, self, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", self, rhs));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[p * n..(p + 1) * n];
                for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    /// Numerically stable softmax along each row of a matrix (or over a vector).
    pub fn softmax_rows(&self) -> Result<Self> {
        let cols = *self.shape.last().unwrap_or(&0);
        if self.rank() > 2 || cols == 0 {
            return invalid(format!("softmax needs a vector or matrix, got {:?}", self.shape));
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err(op, a, b));
    }
    Ok(())
}

pub(crate) fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

/// Zero padding applied by [`conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output length `W - K + 1`.
    Valid,
    /// Output length `W`; the extra pad for even kernels goes to the right.
    Same,
}

impl Padding {
    pub(crate) fn left(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        }
    }

    pub(crate) fn out_len(self, len: usize, kernel: usize) -> Option<usize> {
        match self {
            Padding::Valid => len.checked_sub(kernel).map(|v| v + 1),
            Padding::Same => Some(len),
        }
    }
}

/// Cross-correlation of a `C_in × W` signal with a `C_out × C_in × K` kernel.
pub fn conv1d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, padding: Padding) -> Result<Tensor> {
    let (cin, len) = input.dims2()?;
    let [cout, wcin, k] = weight.shape[..] else {
        return invalid(format!("conv kernel must be rank 3, got {:?}", weight.shape));
    };
    if wcin != cin || k == 0 {
        return Err(shape_err("conv1d", input, weight));
    }
    if let Some(b) = bias {
        if b.shape != [cout] {
            return Err(shape_err("conv1d bias", weight, b));
        }
    }
    let out_len = padding
        .out_len(len, k)
        .filter(|&n| n > 0)
        .ok_or_else(|| shape_err("conv1d", input, weight))?;
    let pl = padding.left(k) as isize;
    let mut out = vec![0.0; cout * out_len];
    for co in 0..cout {
        let b = bias.map_or(0.0, |b| b.data[co]);
        let orow = &mut out[co * out_len..(co + 1) * out_len];
        orow.iter_mut().for_each(|v| *v = b);
        for ci in 0..cin {
            let irow = &input.data[ci * len..(ci + 1) * len];
            for kk in 0..k {
                let w = weight.data[(co * cin + ci) * k + kk];
                for (t, o) in orow.iter_mut().enumerate() {
                    let src = t as isize + kk as isize - pl;
                    if src >= 0 && (src as usize) < len {
                        *o += w * irow[src as usize];
                    }
                }
            }
        }
    }
    Tensor::matrix(cout, out_len, out)
}

/// Indices of the `k` largest values, largest first; ties go to the lower index.
pub fn topk_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return invalid(format!("top-k with k = {k} over {} values", values.len()));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exponential bound for evidence construction.
pub const EXP_CLAMP: f64 = 10.0;

pub fn exp_clipped(x: f64) -> f64 {
    x.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_valid_example() {
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let y = conv1d(&x, &w, None, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[3.0, 5.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::matrix(2, 4, vec![1.0, -2.0, 3.5, 0.25, 7.0, 8.0, -9.0, 1e-3]).unwrap();
        let w = Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        for pad in [Padding::Same, Padding::Valid] {
            assert_eq!(conv1d(&x, &w, None, pad).unwrap(), x);
        }
    }

    #[test]
    fn conv_same_keeps_length() {
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::vector(vec![0.5]);
        let y = conv1d(&x, &w, Some(&b), Padding::Same).unwrap();
        assert_eq!(y.data(), &[3.5, 6.5, 5.5]);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let w = Tensor::new(vec![1, 3, 1], vec![0.0; 3]).unwrap();
        let err = conv1d(&x, &w, None, Padding::Same).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        let w = Tensor::new(vec![1, 2, 5], vec![0.0; 10]).unwrap();
        assert!(conv1d(&x, &w, None, Padding::Valid).is_err());
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::vector(vec![2.0; 4]);
        assert_eq!(x.softmax_rows().unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn sigmoid_and_clamp() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert_eq!(exp_clipped(20.0), 10f64.exp());
        assert_eq!(exp_clipped(0.0), 1.0);
    }

    #[test]
    fn topk_breaks_ties_low_index_first() {
        assert_eq!(topk_indices(&[0.5, 0.9, 0.5, 0.9], 3).unwrap(), vec![1, 3, 0]);
        assert!(topk_indices(&[1.0], 0).is_err());
        assert!(topk_indices(&[1.0], 2).is_err());
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }
}
