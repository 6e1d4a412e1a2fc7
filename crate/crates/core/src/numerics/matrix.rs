//! Row-major dense matrices.

use std::cell::Cell;
use std::fmt;

use crate::error::{param_err, shape_err, Error, Result};
use crate::rng::{self, Site};
use crate::Scalar;

thread_local! {
    static MATMUL_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of matrix-product kernels executed on this thread so far.
pub fn matmul_calls() -> u64 {
    MATMUL_CALLS.with(Cell::get)
}

fn count_matmul() {
    MATMUL_CALLS.with(|c| c.set(c.get() + 1));
}

#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)))
            .finish()
    }
}

impl<T: Scalar> Matrix<T> {
    /// Builds a matrix from row-major data; rejects wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::new",
                format!("{} entries for {rows}x{cols}", data.len()),
            ));
        }
        Matrix { rows, cols, data }.finite("Matrix::new")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Convenience constructor from nested rows of `f64` literals.
    ///
    /// Panics on ragged or non-finite input; intended for fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::of(v))).collect();
        Self::new(rows.len(), cols, data).expect("finite fixture")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn row_vector(values: Vec<T>) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for optimizers; callers keep entries finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix<T> {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!("{}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_nn(self, other, &mut out);
        out.finite("matmul")
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != other.rows {
            return Err(shape_err(
                "matmul_tn",
                format!("({}x{})ᵀ * {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm_tn(self, other, &mut out);
        out.finite("matmul_tn")
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.cols {
            return Err(shape_err(
                "matmul_nt",
                format!("{}x{} * ({}x{})ᵀ", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        self.matmul(&other.transpose())
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn zip_with(&self, other: &Matrix<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Matrix<T>> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
        .finite(op)
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Result<Matrix<T>> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
        .finite("scale")
    }

    /// Adds a `1 × cols` bias to every row.
    pub fn add_row_bias(&self, bias: &Matrix<T>) -> Result<Matrix<T>> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(shape_err(
                "add_row_bias",
                format!("bias {:?} for {:?}", bias.shape(), self.shape()),
            ));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        out.finite("add_row_bias")
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self) -> Matrix<T> {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols.max(1)) {
            softmax_in_place(row);
        }
        out
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Narrows to f32 and widens back, as a checkpoint round-trip would.
    pub fn round_trip_f32(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::of(v.as_f32() as f64)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `out += a · b`, i-k-j order so the inner loop streams contiguous rows.
pub(crate) fn gemm_nn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, out: &mut Matrix<T>) {
    count_matmul();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    T::gemm_acc(m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1, &mut out.data, n as isize);
}

/// `out += aᵀ · b`.
pub(crate) fn gemm_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, out: &mut Matrix<T>) {
    count_matmul();
    let (m, k, n) = (a.cols, a.rows, b.cols);
    T::gemm_acc(m, k, n, &a.data, 1, m as isize, &b.data, n as isize, 1, &mut out.data, n as isize);
}

/// I.i.d. `N(0, std²)` entries from the `Plain` ChaCha8 stream of `seed`.
pub fn gaussian_init<T: Scalar>(rows: usize, cols: usize, std: f64, seed: u64) -> Result<Matrix<T>> {
    gaussian_at(rows, cols, std, seed, Site::Plain)
}

pub(crate) fn gaussian_at<T: Scalar>(
    rows: usize,
    cols: usize,
    std: f64,
    seed: u64,
    site: Site,
) -> Result<Matrix<T>> {
    if !(std > 0.0) || !std.is_finite() {
        return Err(param_err(format!("gaussian std must be positive, got {std}")));
    }
    if rows == 0 || cols == 0 {
        return Err(param_err(format!("gaussian shape must be non-empty, got {rows}x{cols}")));
    }
    let mut r = rng::stream(seed, site);
    let std = T::of(std);
    let data = (0..rows * cols).map(|_| rng::normal(&mut r, std)).collect();
    Matrix::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    type M = Matrix<f64>;

    fn naive(a: &M, b: &M) -> M {
        M::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            s
        })
    }

    #[test]
    fn identity_product() {
        let m = M::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(M::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn zero_product() {
        let m = M::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let z = M::zeros(2, 1);
        assert_eq!(m.matmul(&z).unwrap(), z);
    }

    #[test]
    fn hand_product_matches_triple_loop() {
        let a = M::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = M::from_rows(&[&[5.0], &[6.0]]);
        let expect = M::from_rows(&[&[17.0], &[39.0]]);
        assert_eq!(naive(&a, &b), expect);
        assert_eq!(a.matmul(&b).unwrap(), expect);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let a = M::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn overflow_is_numeric_error() {
        let big = M::filled(1, 2, 1e200);
        let col = M::filled(2, 1, 1e200);
        assert!(matches!(big.matmul(&col), Err(Error::NonFinite("matmul"))));
        assert!(M::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn transposed_products_agree() {
        let a: M = gaussian_init(5, 3, 1.0, 1).unwrap();
        let b: M = gaussian_init(5, 4, 1.0, 2).unwrap();
        let c: M = gaussian_init(6, 3, 1.0, 3).unwrap();
        assert!(a.matmul_tn(&b).unwrap().max_abs_diff(&naive(&a.transpose(), &b)) < 1e-14);
        assert!(a.matmul_nt(&c).unwrap().max_abs_diff(&naive(&a, &c.transpose())) < 1e-14);
    }

    #[test]
    fn gaussian_is_deterministic_and_seed_sensitive() {
        let a: M = gaussian_init(2, 2, 1.0, 0).unwrap();
        let b: M = gaussian_init(2, 2, 1.0, 0).unwrap();
        let c: M = gaussian_init(2, 2, 1.0, 1).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn gaussian_sample_statistics() {
        let m: M = gaussian_init(1000, 1000, 0.02, 7).unwrap();
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 3.0 * (0.02 / 1000.0), "mean {mean}");
        assert!((var.sqrt() - 0.02).abs() < 0.02 * 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn gaussian_rejects_bad_std() {
        assert!(matches!(gaussian_init::<f64>(2, 2, 0.0, 0), Err(Error::Parameter(_))));
        assert!(matches!(gaussian_init::<f64>(2, 2, -1.0, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_rows_normalize() {
        let m: M = gaussian_init(4, 7, 3.0, 5).unwrap();
        let s = m.softmax_rows();
        for i in 0..4 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn counter_tracks_products() {
        let a = M::identity(3);
        let before = matmul_calls();
        a.matmul(&a).unwrap();
        a.matmul_tn(&a).unwrap();
        assert_eq!(matmul_calls() - before, 2);
    }

    proptest::proptest! {
        #[test]
        fn matmul_is_associative(m in 1usize..16, k in 1usize..16, p in 1usize..16, n in 1usize..16, seed in 0u64..1000) {
            use rand::Rng;
            let mut r = crate::rng::stream(seed, Site::Plain);
            let mut draw = |rows, cols| M::from_fn(rows, cols, |_, _| r.random_range(-1.0..=1.0));
            let a = draw(m, k);
            let b = draw(k, p);
            let c = draw(p, n);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            proptest::prop_assert!(left.max_abs_diff(&right) < 1e-9);
        }
    }
}
