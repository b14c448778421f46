//! Dense row-major `f64` matrices with the handful of kernels the model
//! needs.
//!
//! Every reduction runs left to right over the inner index, so repeated
//! evaluations are bitwise identical. Products skip exact zeros in the left
//! operand; for finite inputs this never changes a result bit, and it makes
//! the one-hot positional blocks of the residual stream cheap.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use crate::error::{Error, Result};

/// Sentinel used for masked attention logits.
pub const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// The `n x n` antidiagonal (row-reversal) matrix.
    pub fn antidiagonal(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, n - 1 - i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("from_vec", (rows, cols), (data.len(), 1)));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input, so this is
    /// meant for literals and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Copies out the window `rows x cols`.
    pub fn submatrix(&self, rows: Range<usize>, cols: Range<usize>) -> Result<Matrix> {
        if rows.end > self.rows || cols.end > self.cols || rows.start > rows.end || cols.start > cols.end
        {
            return Err(Error::shape(
                "submatrix",
                self.shape(),
                (rows.end, cols.end),
            ));
        }
        let mut out = Matrix::zeros(rows.len(), cols.len());
        for (dst, r) in rows.enumerate() {
            out.row_mut(dst).copy_from_slice(&self.row(r)[cols.clone()]);
        }
        Ok(out)
    }

    /// Writes `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) -> Result<()> {
        if r0 + block.rows > self.rows || c0 + block.cols > self.cols {
            return Err(Error::shape("set_block", self.shape(), block.shape()));
        }
        for r in 0..block.rows {
            self.row_mut(r0 + r)[c0..c0 + block.cols].copy_from_slice(block.row(r));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                axpy(o, aik, rhs.row(k));
            }
        }
        Ok(out)
    }

    /// `self * rhs^T` without materialising the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::shape("matmul_t", self.shape(), rhs.shape()));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            if a.iter().all(|&x| x == 0.0) {
                continue;
            }
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    /// `self^T * rhs` without materialising the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::shape("t_matmul", self.shape(), rhs.shape()));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        self.t_matmul_acc(rhs, &mut out);
        Ok(out)
    }

    /// `out += self^T * rhs`; shapes are the caller's responsibility.
    pub(crate) fn t_matmul_acc(&self, rhs: &Matrix, out: &mut Matrix) {
        debug_assert_eq!(self.rows, rhs.rows);
        debug_assert_eq!(out.shape(), (self.cols, rhs.cols));
        for t in 0..self.rows {
            let b = rhs.row(t);
            for (i, &ati) in self.row(t).iter().enumerate() {
                if ati == 0.0 {
                    continue;
                }
                axpy(&mut out.data[i * rhs.cols..(i + 1) * rhs.cols], ati, b);
            }
        }
    }

    /// Column-wise concatenation `[self, rhs]`.
    pub fn hconcat(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::shape("hconcat", self.shape(), rhs.shape()));
        }
        let cols = self.cols + rhs.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(rhs.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Row-wise concatenation `[self; rhs]`.
    pub fn vconcat(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::shape("vconcat", self.shape(), rhs.shape()));
        }
        let mut data = Vec::with_capacity(self.data.len() + rhs.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&rhs.data);
        Ok(Matrix {
            rows: self.rows + rhs.rows,
            cols: self.cols,
            data,
        })
    }

    /// Replaces strictly-above-diagonal entries with [`NEG_INF`].
    pub fn causal_mask(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::shape("causal_mask", self.shape(), self.shape()));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for v in &mut out.row_mut(r)[r + 1..] {
                *v = NEG_INF;
            }
        }
        Ok(out)
    }

    /// Row-wise softmax, stabilised by the row maximum. [`NEG_INF`] entries
    /// map to exact zeros.
    pub fn row_softmax(&self) -> Result<Matrix> {
        let mut out = self.clone();
        for r in 0..self.rows {
            softmax_in_place(out.row_mut(r)).ok_or(Error::DegenerateRow { row: r })?;
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub(crate) fn add_assign(&mut self, rhs: &Matrix) {
        debug_assert_eq!(self.shape(), rhs.shape());
        self.data.iter_mut().zip(&rhs.data).for_each(|(a, b)| *a += b);
    }

    fn zip_with(&self, rhs: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(op, self.shape(), rhs.shape()));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, rhs: &Matrix) -> Option<f64> {
        (self.shape() == rhs.shape()).then(|| {
            self.data
                .iter()
                .zip(&rhs.data)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        })
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl core::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub(crate) fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Softmax of one row in place. Returns `None` if every entry is `-inf`.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> Option<()> {
    let max = row.iter().copied().fold(NEG_INF, f64::max);
    if max == NEG_INF {
        return None;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if *v == NEG_INF { 0.0 } else { libm::exp(*v - max) };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Some(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[2.0, 1.0], &[4.0, 3.0]]));

        let x = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 - 5.5);
        assert_eq!(Matrix::identity(3).matmul(&x).unwrap(), x);
        assert_eq!(Matrix::zeros(2, 3).matmul(&x).unwrap(), Matrix::zeros(2, 4));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        assert_eq!(err, Error::shape("matmul", (2, 3), (2, 3)));
        assert!(alloc::format!("{err}").contains("2x3 vs 2x3"));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Matrix::from_fn(4, 3, |r, c| libm::sin((r * 3 + c) as f64));
        let b = Matrix::from_fn(5, 3, |r, c| libm::cos((r + 2 * c) as f64));
        assert_eq!(a.matmul_t(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
        let c = Matrix::from_fn(4, 2, |r, c| (r as f64) - (c as f64) * 0.5);
        assert_eq!(a.t_matmul(&c).unwrap(), a.transpose().matmul(&c).unwrap());
    }

    #[test]
    fn causal_mask_examples() {
        let v = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let masked = v.causal_mask().unwrap();
        assert_eq!(masked, m(&[&[1.0, NEG_INF], &[3.0, 4.0]]));
        assert_eq!(masked.causal_mask().unwrap(), masked);
        let one = m(&[&[7.0]]);
        assert_eq!(one.causal_mask().unwrap(), one);
        assert!(matches!(
            Matrix::zeros(2, 3).causal_mask(),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let s = Matrix::zeros(1, 4).row_softmax().unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 0.25));

        let s = m(&[&[50.0, 0.0]]).row_softmax().unwrap();
        let eps = 1.0 / (1.0 + libm::exp(50.0));
        assert!(eps < 2e-22);
        assert!((s[(0, 0)] - (1.0 - eps)).abs() <= f64::EPSILON);
        assert!((s[(0, 1)] - eps).abs() <= 1e-30);

        let s = m(&[&[3.5, NEG_INF]]).row_softmax().unwrap();
        assert_eq!(s.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let v = m(&[&[0.0, 1.0], &[NEG_INF, NEG_INF]]);
        assert_eq!(v.row_softmax().unwrap_err(), Error::DegenerateRow { row: 1 });
    }

    #[test]
    fn hconcat_and_transpose() {
        let x = Matrix::from_fn(3, 2, |r, c| (r + c) as f64);
        assert_eq!(x.hconcat(&Matrix::zeros(3, 0)).unwrap(), x);
        assert_eq!(x.transpose().transpose(), x);
        let h = Matrix::identity(3).hconcat(&Matrix::identity(3)).unwrap();
        assert_eq!(h.shape(), (3, 6));
        assert!(matches!(
            x.hconcat(&Matrix::zeros(2, 1)),
            Err(Error::Shape { .. })
        ));
    }

    fn matrix(rows: usize, cols: usize, bound: f64) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-bound..bound, rows * cols)
            .prop_map(move |data| Matrix::from_vec(rows, cols, data).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in matrix(4, 9, 700.0)) {
            let s = v.row_softmax().unwrap();
            for r in 0..s.rows() {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn softmax_is_shift_invariant(v in matrix(3, 7, 300.0), shifts in proptest::collection::vec(-300.0f64..300.0, 3)) {
            let mut shifted = v.clone();
            for (r, c) in shifts.iter().enumerate() {
                shifted.row_mut(r).iter_mut().for_each(|x| *x += c);
            }
            let a = v.row_softmax().unwrap();
            let b = shifted.row_softmax().unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        }

        #[test]
        fn causal_mask_is_idempotent(v in matrix(6, 6, 10.0)) {
            let once = v.causal_mask().unwrap();
            let twice = once.causal_mask().unwrap();
            prop_assert_eq!(once.as_slice().len(), twice.as_slice().len());
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn transpose_of_product(a in matrix(10, 10, 1.0), b in matrix(10, 10, 1.0)) {
            let lhs = a.matmul(&b).unwrap().transpose();
            let rhs = b.transpose().matmul(&a.transpose()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
        }
    }
}
