//! Dense row-major tensors.
//!
//! Every value that flows through a [`Tape`](super::Tape) is a matrix; a
//! vector is a `1 x k` matrix. Higher ranks exist only so checkpoints can
//! carry arbitrary shapes.

use std::fmt;

use super::TensorError;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::EmptyExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row_vector(data: Vec<f64>) -> Result<Self, TensorError> {
        let cols = data.len();
        Self::new(vec![1, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Ragged);
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count when viewed as a matrix (rank-1 tensors are one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one extent")
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
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

    /// Rounds every value through 32-bit storage.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `a (r x k) * b (k x c)`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * c..(p + 1) * c];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![r, c],
        data: out,
    }
}

/// `a (r x k) * b^T` where `b` is `c x k`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k, c) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..c {
            let b_row = &b.data[j * k..(j + 1) * k];
            out[i * c + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        shape: vec![r, c],
        data: out,
    }
}

/// `a^T * b` where `a` is `k x r` and `b` is `k x c`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, r, c) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; r * c];
    for p in 0..k {
        let a_row = &a.data[p * r..(p + 1) * r];
        let b_row = &b.data[p * c..(p + 1) * c];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * c..(i + 1) * c];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![r, c],
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_empty_extents() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let ab = matmul(&a, &b);
        assert_eq!(ab.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(matmul_nt(&a, &b.transpose()), ab);
        assert_eq!(matmul_tn(&a.transpose(), &b), ab);
    }
}
