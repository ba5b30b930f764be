//! Dense row-major `f64` tensors and the forward kernels shared by the tape,
//! the inference paths and the tests.
//!
//! Every reduction sums in sequential row-major order: for a matrix product
//! `out[r, c] = Σ_i x[r, i] · w[i, c]` the terms are added for `i = 0, 1, …`
//! in that order, so results are bit-reproducible for identical inputs.

use crate::error::{Error, Result};

/// Clamp floor applied before taking logarithms of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as a matrix: rank 2 as is, rank 1 as a single
    /// row, rank 0 as 1×1.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows `start..start + count` as a new matrix.
    pub fn slice_rows(&self, start: usize, count: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![count, c],
            data: self.data[start * c..(start + count) * c].to_vec(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Stacks equal-width matrices vertically.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map(|t| t.cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::dim(
                    "vstack",
                    format!("width {} vs {}", p.cols(), cols),
                ));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, cols, data)
    }

    /// Concatenates equal-height matrices side by side.
    pub fn hstack(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map(|t| t.rows()).unwrap_or(0);
        let mut cols = 0;
        for p in parts {
            if p.rows() != rows {
                return Err(Error::dim(
                    "hstack",
                    format!("height {} vs {}", p.rows(), rows),
                ));
            }
            cols += p.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor::matrix(rows, cols, data)
    }
}

/// `out += a · b` for row-major `a: rows×inner`, `b: inner×cols`.
///
/// Axpy form: each output element accumulates its `inner` terms in index
/// order while the innermost loop runs across independent columns.
pub(crate) fn gemm_acc(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    rows: usize,
    inner: usize,
    cols: usize,
) {
    for r in 0..rows {
        let a_row = &a[r * inner..(r + 1) * inner];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        for (i, &a_ri) in a_row.iter().enumerate() {
            if a_ri == 0.0 {
                continue;
            }
            let b_row = &b[i * cols..(i + 1) * cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ri * bv;
            }
        }
    }
}

/// `out += aᵀ · b` for `a: rows×inner`, `b: rows×cols`; `out: inner×cols`.
pub(crate) fn gemm_tn_acc(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    rows: usize,
    inner: usize,
    cols: usize,
) {
    for r in 0..rows {
        let a_row = &a[r * inner..(r + 1) * inner];
        let b_row = &b[r * cols..(r + 1) * cols];
        for (i, &a_ri) in a_row.iter().enumerate() {
            if a_ri == 0.0 {
                continue;
            }
            let out_row = &mut out[i * cols..(i + 1) * cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ri * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, ca) = a.dims();
    let (rb, cb) = b.dims();
    if ca != rb {
        return Err(Error::dim(
            "matmul",
            format!("lhs {}x{} vs rhs {}x{}", ra, ca, rb, cb),
        ));
    }
    let mut out = vec![0.0; ra * cb];
    gemm_acc(a.data(), b.data(), &mut out, ra, ca, cb);
    Tensor::matrix(ra, cb, out)
}

/// Adds a length-`cols` bias to every row.
pub fn add_row_vector(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims();
    if b.len() != c {
        return Err(Error::dim(
            "add_row_vector",
            format!("bias has {} entries for {} columns", b.len(), c),
        ));
    }
    let mut out = x.clone();
    for i in 0..r {
        for (o, &bv) in out.row_mut(i).iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(out)
}

/// `x · W + b` for `x: B×I`, `W: I×O`, `b: O`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, i) = x.dims();
    let (wi, wo) = w.dims();
    if i != wi {
        return Err(Error::dim(
            "linear",
            format!("input x has {} columns but weight W has {} rows", i, wi),
        ));
    }
    if b.len() != wo {
        return Err(Error::dim(
            "linear",
            format!("bias b has {} entries but weight W has {} columns", b.len(), wo),
        ));
    }
    let y = matmul(x, w)?;
    add_row_vector(&y, b)
}

/// Numerically stable softmax of a single vector.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("softmax input is not finite".into()));
    }
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax_rows(z: &Tensor) -> Tensor {
    let (r, _) = z.dims();
    let mut out = Tensor::zeros(&[r, z.cols()]);
    for i in 0..r {
        softmax_into(z.row(i), out.row_mut(i));
    }
    out
}

/// `−log p[argmax l]` with `p` clamped below at [`LOG_FLOOR`].
pub fn cross_entropy(p: &[f64], onehot: &[f64]) -> Result<f64> {
    if p.len() != onehot.len() {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} probabilities vs {} label entries", p.len(), onehot.len()),
        ));
    }
    let label = onehot_index(onehot)?;
    Ok(-p[label].max(LOG_FLOOR).ln())
}

/// Index of the single 1 in a one-hot vector.
pub fn onehot_index(onehot: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in onehot.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(Error::Domain("label has more than one hot entry".into()));
            }
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::Domain(format!("label entry {} is {}, not 0/1", i, v)));
        }
    }
    hot.ok_or_else(|| Error::Domain("label has no hot entry".into()))
}

pub fn onehot(n: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    v
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_weight_returns_input() {
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.25, 0.0, -7.0]).unwrap();
        let y = linear_forward(&x, &Tensor::identity(3), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn linear_zero_input_gives_bias_rows() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::matrix(3, 2, vec![0.3, -1.0, 2.0, 0.5, 4.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_operands() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 2]);
        let err = linear_forward(&x, &w, &Tensor::zeros(&[2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input x") && msg.contains("weight W"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_empty() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(softmax(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_entropy_values() {
        let ce = cross_entropy(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!(ce <= 1e-11);
        let ce = cross_entropy(&[1.0 / 3.0; 3], &[0.0, 1.0, 0.0]).unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-12);
        let ce = cross_entropy(&[0.7, 0.2, 0.1], &[1.0, 0.0, 0.0]).unwrap();
        assert!((ce + 0.7f64.ln()).abs() < 1e-12);
        assert!((ce - 0.3567).abs() < 1e-4);
        // a zero probability on the label is clamped rather than infinite
        let ce = cross_entropy(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((ce - (-LOG_FLOOR.ln())).abs() < 1e-9);
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], &[0.5, 0.5]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], &[1.0, 1.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn hstack_vstack_shapes() {
        let a = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let h = Tensor::hstack(&[&a, &b]).unwrap();
        assert_eq!(h.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let v = Tensor::vstack(&[&b, &b]).unwrap();
        assert_eq!(v.shape(), &[4, 2]);
        assert!(Tensor::hstack(&[&a, &v]).is_err());
    }
}
