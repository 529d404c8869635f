//! Dense row-major tensors with forward-mode (dual) and reverse-mode
//! differentiation support.

mod dual;
mod tape;

pub use dual::{jvp, DualTensor};
pub use tape::{grad, GradientTape, Var};

use crate::error::{dim_err, numeric_err, Result};
use crate::scalar::Scalar;

/// Dense tensor of scalars stored contiguously in row-major order.
///
/// Most of the crate works with rank-2 tensors shaped `[batch, features]`;
/// a rank-1 tensor is treated as a single row.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(numeric_err(format!("non-finite element at flat index {bad}")));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness scan; callers guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Stacks equally sized rows into a `[rows, cols]` matrix.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows (1 for a rank-1 tensor).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Length of one row.
    pub fn cols(&self) -> usize {
        if self.rows() == 0 {
            return self.shape.get(1..).map_or(0, |s| s.iter().product());
        }
        self.data.len() / self.rows()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        let c = self.cols().max(1);
        self.data.chunks(c)
    }

    /// Reinterprets as `[rows, cols]`.
    pub fn as_matrix(&self) -> Self {
        Self { shape: vec![self.rows(), self.cols()], data: self.data.clone() }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        Ok(Self { shape, data: self.data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, context: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(numeric_err(format!("non-finite value in {context}")))
        }
    }

    pub fn check_same_shape(&self, other: &Self, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err(format!(
                "{context}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination; shapes must agree.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, "elementwise op")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// `self + k * other`.
    pub fn axpy(&self, k: T, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + k * b)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&self, factors: &[T]) -> Result<Self> {
        if factors.len() != self.rows() {
            return Err(dim_err(format!(
                "{} row factors for {} rows",
                factors.len(),
                self.rows()
            )));
        }
        let mut out = self.clone();
        let c = self.cols();
        for (row, &k) in out.data.chunks_mut(c.max(1)).zip(factors) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        Ok(out)
    }

    /// Squared Euclidean norm of every row.
    pub fn row_sq_norms(&self) -> Vec<T> {
        self.iter_rows()
            .map(|r| r.iter().fold(T::zero(), |acc, &v| acc + v * v))
            .collect()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    /// `self · w + bias` where `w` is a row-major `[cols, out]` block.
    pub fn affine(&self, w: &[T], bias: Option<&[T]>, out: usize) -> Self {
        let (n, k) = (self.rows(), self.cols());
        assert_eq!(w.len(), k * out, "weight block size");
        let mut data = match bias {
            Some(b) => {
                assert_eq!(b.len(), out, "bias size");
                let mut d = Vec::with_capacity(n * out);
                for _ in 0..n {
                    d.extend_from_slice(b);
                }
                d
            }
            None => vec![T::zero(); n * out],
        };
        T::gemm(
            n,
            k,
            out,
            T::one(),
            &self.data,
            k as isize,
            1,
            w,
            out as isize,
            1,
            T::one(),
            &mut data,
            out as isize,
            1,
        );
        Self { shape: vec![n, out], data }
    }

    /// `self · wᵀ` where `w` is a row-major `[out, cols]` block.
    pub(crate) fn matmul_transposed(&self, w: &[T], out: usize) -> Self {
        let (n, k) = (self.rows(), self.cols());
        assert_eq!(w.len(), k * out, "weight block size");
        let mut data = vec![T::zero(); n * out];
        T::gemm(
            n,
            k,
            out,
            T::one(),
            &self.data,
            k as isize,
            1,
            w,
            1,
            k as isize,
            T::zero(),
            &mut data,
            out as isize,
            1,
        );
        Self { shape: vec![n, out], data }
    }

    /// Accumulates `selfᵀ · other` into a row-major `[cols, other.cols]` buffer.
    pub(crate) fn accumulate_outer(&self, other: &Self, acc: &mut [T]) {
        let (n, k) = (self.rows(), self.cols());
        let out = other.cols();
        assert_eq!(other.rows(), n);
        assert_eq!(acc.len(), k * out);
        T::gemm(
            k,
            n,
            out,
            T::one(),
            &self.data,
            1,
            k as isize,
            &other.data,
            out as isize,
            1,
            T::one(),
            acc,
            out as isize,
            1,
        );
    }

    /// Column sums accumulated into `acc`.
    pub(crate) fn accumulate_col_sums(&self, acc: &mut [T]) {
        for row in self.iter_rows() {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }

    /// Gathers the listed rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { shape: vec![idx.len(), c], data }
    }

    /// Concatenates along the column axis.
    pub fn hcat(parts: &[&Self]) -> Result<Self> {
        let n = parts.first().map_or(0, |p| p.rows());
        if parts.iter().any(|p| p.rows() != n) {
            return Err(dim_err("hcat row mismatch"));
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(n * cols);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self { shape: vec![n, cols], data })
    }

    /// Concatenates along the row axis.
    pub fn vcat(parts: &[&Self]) -> Result<Self> {
        let c = parts.first().map_or(0, |p| p.cols());
        if parts.iter().any(|p| p.cols() != c && !p.is_empty()) {
            return Err(dim_err("vcat column mismatch"));
        }
        let data: Vec<T> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        let rows = if c == 0 { 0 } else { data.len() / c };
        Ok(Self { shape: vec![rows, c], data })
    }
}

/// Numerically safe logistic function.
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Sigmoid-linear unit `x·σ(x)`, the smooth activation used by every network.
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Derivative of [`silu`].
pub(crate) fn silu_prime<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn affine_matches_naive_product() {
        let x: Tensor<f64> = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        // w is [2, 3]
        let w = [1.0, 0.0, 2.0, -1.0, 1.0, 0.5];
        let b = [0.1, 0.2, 0.3];
        let y = x.affine(&w, Some(&b), 3);
        assert_eq!(y.shape(), &[2, 3]);
        let expect = [1.0 - 2.0 + 0.1, 2.0 + 0.2, 2.0 + 1.0 + 0.3, 3.0 + 1.0 + 0.1, -1.0 + 0.2, 6.0 - 0.5 + 0.3];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-14);
        }
        // same block read as [out, cols] = [3, 2]
        let yt = x.matmul_transposed(&w, 3);
        assert!((yt.row(0)[0] - (1.0 * 1.0 + 2.0 * 0.0)).abs() < 1e-14);
        assert!((yt.row(1)[2] - (3.0 * 1.0 - 0.5)).abs() < 1e-14);
    }

    #[test]
    fn outer_accumulation() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let mut acc = vec![0.0; 2];
        a.accumulate_outer(&b, &mut acc);
        assert_eq!(acc, vec![1.0 - 3.0, 2.0 - 4.0]);
    }

    #[test]
    fn silu_is_smooth_and_saturates() {
        assert_eq!(silu(0.0f64), 0.0);
        assert!(silu(-1000.0f64).abs() < 1e-300);
        assert!((silu(1000.0f64) - 1000.0).abs() < 1e-9);
        let h = 1e-6;
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0f64] {
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_prime(x)).abs() < 1e-8);
        }
    }
}
