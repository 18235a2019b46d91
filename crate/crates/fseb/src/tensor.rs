//! Dense row-major tensors.
//!
//! The tensor type is deliberately small: rank 0 (scalars), rank 1
//! (vectors), and rank 2 (matrices) cover everything the training stack
//! needs. Operations validate shapes and return [`Error::ShapeMismatch`]
//! rather than panicking.

use crate::error::{Error, Result};
use crate::num::Real;

/// Dense row-major tensor of rank 0, 1, or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    /// Builds a tensor from raw data, validating the element count.
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                details: format!("rank {} exceeds the supported maximum of 2", shape.len()),
            });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                details: format!(
                    "shape {:?} needs {} elements but {} were provided",
                    shape,
                    expected,
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: F) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![F::zero(); n] }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Number of rows when viewed as a matrix (rank-1 tensors count as a
    /// single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    /// Value of a rank-0 tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "item",
                details: format!("expected a single element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Element of a rank-2 tensor.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> F {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Mutable element of a rank-2 tensor.
    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut F {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &mut self.data[i * cols + j]
    }

    /// Borrow of one row of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[F] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Copies one row of a rank-2 tensor into a rank-1 tensor.
    pub fn row_tensor(&self, i: usize) -> Tensor<F> {
        Tensor { shape: vec![self.cols()], data: self.row(i).to_vec() }
    }

    /// Stacks rank-1 tensors of equal length into a rank-2 tensor.
    pub fn from_rows(rows: &[Tensor<F>]) -> Result<Self> {
        let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != ncols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    details: format!("row {} has {} elements, expected {}", i, r.len(), ncols),
                });
            }
            data.extend_from_slice(r.data());
        }
        Tensor::from_vec(vec![rows.len(), ncols], data)
    }

    /// Matrix product `self · other`. Rank-1 operands are promoted to a
    /// single row / single column where the dimensions make that the only
    /// consistent reading.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = match other.rank() {
            2 => (other.shape[0], other.shape[1]),
            1 => (other.shape[0], 1),
            r => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    details: format!("right operand has rank {}", r),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                details: format!("inner dimensions {} and {} differ", k, k2),
            });
        }
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        // Preserve rank-1 shapes where the caller supplied them.
        let out_shape = match (self.rank(), other.rank()) {
            (1, 2) => vec![n],
            (2, 1) => vec![m],
            (1, 1) => vec![1],
            _ => vec![m, n],
        };
        Tensor::from_vec(out_shape, out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                details: format!("inner dimensions {} and {} differ", k, k2),
            });
        }
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                let mut acc = F::zero();
                for (&a, &b) in arow.iter().zip(brow.iter()) {
                    acc += a * b;
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (k, m) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                details: format!("leading dimensions {} and {} differ", k, k2),
            });
        }
        let mut out = vec![F::zero(); m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    /// Transposed copy of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor<F>> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                details: format!("expected rank 2, got {:?}", self.shape),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(vec![n, m], out)
    }

    fn zip_same_shape(
        &self,
        other: &Tensor<F>,
        op: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                details: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Elementwise sum. Also accepts a rank-1 right operand broadcast
    /// across the rows of a rank-2 left operand (the bias pattern).
    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.rank() == 2 && other.rank() == 1 && self.shape[1] == other.shape[0] {
            let mut out = self.clone();
            let n = other.shape[0];
            for row in out.data.chunks_mut(n) {
                for (o, &b) in row.iter_mut().zip(other.data.iter()) {
                    *o = *o + b;
                }
            }
            return Ok(out);
        }
        self.zip_same_shape(other, "add", |a, b| a + b)
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_same_shape(other, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_same_shape(other, "mul", |a, b| a * b)
    }

    /// Scalar multiple.
    pub fn scale(&self, c: F) -> Tensor<F> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&a| a * c).collect() }
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&a| f(a)).collect() }
    }

    /// Sum of all elements.
    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    /// Dot product with the flattened layout of an identically shaped tensor.
    pub fn dot(&self, other: &Tensor<F>) -> Result<F> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "dot",
                details: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a * b).sum())
    }

    /// Squared Euclidean norm of the flattened data.
    pub fn squared_norm(&self) -> F {
        self.data.iter().map(|&a| a * a).sum()
    }

    /// In-place `self += c · other` (shapes must match exactly).
    pub fn axpy(&mut self, c: F, other: &Tensor<F>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "axpy",
                details: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
        Ok(())
    }

    /// Copy of the tensor with a new shape over the same flat data.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor<F>> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshaped",
                details: format!(
                    "cannot view {} elements as shape {:?}",
                    self.data.len(),
                    shape
                ),
            });
        }
        Tensor::from_vec(shape, self.data.clone())
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    #[test]
    fn from_vec_validates_element_count() {
        assert!(T::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(T::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(T::from_vec(vec![1, 2, 3], vec![0.0; 6]).is_err());
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = T::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = T::from_vec(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = T::from_vec(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]).unwrap();
        let b = T::from_vec(vec![4, 3], vec![1.0, 0.0, 2.0, -1.0, 1.0, 0.5, 3.0, -2.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let nt = a.matmul_nt(&b).unwrap();
        let explicit = a.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(nt.data(), explicit.data());

        let c = T::from_vec(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let tn = a.matmul_tn(&c).unwrap();
        let explicit = a.transpose().unwrap().matmul(&c).unwrap();
        assert_eq!(tn.data(), explicit.data());
    }

    #[test]
    fn add_broadcasts_bias_rows() {
        let x = T::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = T::from_vec(vec![2], vec![10.0, 20.0]).unwrap();
        let y = x.add(&b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let x = T::zeros(vec![2, 2]);
        let y = T::zeros(vec![3]);
        assert!(x.sub(&y).is_err());
        assert!(x.mul(&y).is_err());
        assert!(x.matmul(&y).is_err());
    }
}
