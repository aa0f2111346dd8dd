//! Dense row-major kernels shared by every layer, plus the central-difference
//! gradient oracle.
//!
//! Everything here is serial and has a fixed accumulation order, so repeated
//! calls on identical inputs are bitwise identical. Two orders are used:
//! [`matmul`] sums strictly left to right, while [`dot`] (the inner kernel of
//! projections and attention) keeps eight interleaved partial sums that are
//! combined in a fixed tree. Both are reproducible; the second vectorizes.

use std::fmt;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

const LANES: usize = 8;

/// Storage precision of a tensor, derived from its scalar type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn of<T: Scalar>() -> Self {
        if T::WIDTH == 4 {
            Precision::Single
        } else {
            Precision::Double
        }
    }
}

/// Owned dense vector.
#[derive(Clone, PartialEq, Default)]
pub struct Vector<T>(Vec<T>);

impl<T: Scalar> Vector<T> {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![T::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn norm(&self) -> T {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        max_abs_diff(&self.0, &other.0)
    }
}

impl<T> From<Vec<T>> for Vector<T> {
    fn from(v: Vec<T>) -> Self {
        Vector(v)
    }
}

impl<T: Scalar> From<&[T]> for Vector<T> {
    fn from(v: &[T]) -> Self {
        Vector(v.to_vec())
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for Vector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

impl<T: fmt::Debug> fmt::Debug for Vector<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

/// Dense row-major matrix. `data.len() == rows * cols` always holds.
#[derive(Clone, PartialEq, Default)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Zero rows with a fixed width, ready for [`Matrix::push_row`].
    pub fn empty(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut m = Self::empty(cols);
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
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

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn precision(&self) -> Precision {
        Precision::of::<T>()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        if row.len() != self.cols {
            return Err(shape_err("Matrix::push_row", self.cols, row.len()));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Removes and returns the first row, shifting the rest up.
    pub fn pop_front_row(&mut self) -> Option<Vec<T>> {
        if self.rows == 0 {
            return None;
        }
        let front: Vec<T> = self.data.drain(..self.cols).collect();
        self.rows -= 1;
        Some(front)
    }

    /// New matrix holding the listed rows in the listed order.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Vertical concatenation.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(shape_err("Matrix::vstack", self.cols, other.cols));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[T]) -> Result<Vector<T>> {
        if x.len() != self.cols {
            return Err(shape_err("matvec", self.cols, x.len()));
        }
        Ok(self.row_iter().map(|row| dot(row, x)).collect::<Vec<_>>().into())
    }

    /// `self · otherᵀ`, i.e. every row of `self` projected by the rows of
    /// `other`. This is how activations (rows) meet weight matrices stored as
    /// `out × in`.
    pub fn matmul_transposed(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(shape_err(
                "matmul_transposed",
                format!("{} columns", self.cols),
                other.cols,
            ));
        }
        let mut out = Vec::with_capacity(self.rows * other.rows);
        for a in self.row_iter() {
            for b in other.row_iter() {
                out.push(dot(a, b));
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: other.rows,
            data: out,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        if self.shape() != other.shape() {
            return T::infinity();
        }
        max_abs_diff(&self.data, &other.data)
    }

    /// Converts to another scalar type through `f64`.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        let mut list = f.debug_list();
        for r in 0..self.rows {
            list.entry(&&self.data[r * self.cols..(r + 1) * self.cols]);
        }
        list.finish()
    }
}

/// Inner product with eight interleaved partial sums reduced in a fixed tree.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Pushes `dot(q, row(j))` for every `j` in `range` onto `out`. Rows are taken
/// four at a time so the accumulation chains overlap; each result is bitwise
/// equal to [`dot`].
pub fn dots_by<'a, T: Scalar + 'a>(
    q: &[T],
    row: impl Fn(usize) -> &'a [T],
    range: std::ops::Range<usize>,
    out: &mut Vec<T>,
) {
    let mut j = range.start;
    while j + 4 <= range.end {
        out.extend_from_slice(&dot4(q, [row(j), row(j + 1), row(j + 2), row(j + 3)]));
        j += 4;
    }
    for j in j..range.end {
        out.push(dot(q, row(j)));
    }
}

#[inline]
fn dot4<T: Scalar>(q: &[T], rows: [&[T]; 4]) -> [T; 4] {
    let n = q.len();
    let body = n - n % LANES;
    let [r0, r1, r2, r3] = rows.map(|r| &r[..n]);
    let mut a0 = [T::zero(); LANES];
    let mut a1 = [T::zero(); LANES];
    let mut a2 = [T::zero(); LANES];
    let mut a3 = [T::zero(); LANES];
    let it = q[..body]
        .chunks_exact(LANES)
        .zip(r0[..body].chunks_exact(LANES))
        .zip(r1[..body].chunks_exact(LANES))
        .zip(r2[..body].chunks_exact(LANES))
        .zip(r3[..body].chunks_exact(LANES));
    for ((((x, y0), y1), y2), y3) in it {
        let x: &[T; LANES] = x.try_into().unwrap();
        let y0: &[T; LANES] = y0.try_into().unwrap();
        let y1: &[T; LANES] = y1.try_into().unwrap();
        let y2: &[T; LANES] = y2.try_into().unwrap();
        let y3: &[T; LANES] = y3.try_into().unwrap();
        for l in 0..LANES {
            a0[l] += x[l] * y0[l];
            a1[l] += x[l] * y1[l];
            a2[l] += x[l] * y2[l];
            a3[l] += x[l] * y3[l];
        }
    }
    let finish = |a: &[T; LANES], r: &[T]| {
        let mut tail = T::zero();
        for i in body..n {
            tail += q[i] * r[i];
        }
        ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7])) + tail
    };
    [finish(&a0, r0), finish(&a1, r1), finish(&a2, r2), finish(&a3, r3)]
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    if a.len() != b.len() {
        return T::infinity();
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x - *y).abs())
        .fold(T::zero(), |m, d| if d > m || d.is_nan() { d } else { m })
}

/// Outer product `a bᵀ` (`a.len() × b.len()`).
pub fn outer<T: Scalar>(a: &[T], b: &[T]) -> Matrix<T> {
    Matrix::from_fn(a.len(), b.len(), |r, c| a[r] * b[c])
}

/// Standard matrix product, each output element summed strictly left to right.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.rows() {
        return Err(shape_err(
            "matmul",
            format!("B with {} rows", a.cols()),
            format!("{} rows", b.rows()),
        ));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = T::zero();
            for p in 0..a.cols() {
                acc += a[(i, p)] * b[(p, j)];
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}

/// In-place numerically stable softmax of one row (max subtracted first).
/// An empty row is left untouched.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let Some(max) = row.iter().copied().reduce(T::max) else {
        return;
    };
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Column-wise arithmetic mean of the rows.
///
/// Rows are summed pairwise (halving recursion), so the mean of `2^j` copies
/// of one row reproduces that row exactly.
pub fn mean_pool<T: Scalar>(rows: &Matrix<T>) -> Result<Vector<T>> {
    mean_of_range(rows, 0, rows.rows())
}

/// Mean of rows `start..end` of `m`, with the same summation order as
/// [`mean_pool`].
pub(crate) fn mean_of_range<T: Scalar>(m: &Matrix<T>, start: usize, end: usize) -> Result<Vector<T>> {
    mean_of_rows_by(|i| m.row(i), start, end)
}

/// Pairwise mean of rows `start..end` fetched through `row`.
pub(crate) fn mean_of_rows_by<'a, T: Scalar>(
    row: impl Fn(usize) -> &'a [T] + Copy,
    start: usize,
    end: usize,
) -> Result<Vector<T>> {
    if end <= start {
        return Err(Error::EmptyChunk);
    }
    let mut acc = pairwise_sum(row, start, end);
    let denom = T::lit((end - start) as f64);
    for a in acc.iter_mut() {
        *a /= denom;
    }
    Ok(acc.into())
}

fn pairwise_sum<'a, T: Scalar>(row: impl Fn(usize) -> &'a [T] + Copy, start: usize, end: usize) -> Vec<T> {
    if end - start == 1 {
        return row(start).to_vec();
    }
    let mid = start + (end - start) / 2;
    let mut left = pairwise_sum(row, start, mid);
    let right = pairwise_sum(row, mid, end);
    for (l, r) in left.iter_mut().zip(right) {
        *l += r;
    }
    left
}

/// Central-difference gradient `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` per coordinate.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&[T]) -> T, x: &[T], eps: T) -> Result<Vector<T>> {
    if !(eps > T::zero()) {
        return Err(Error::Input(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    let two_eps = eps + eps;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe);
        probe[i] = orig - eps;
        let lo = f(&probe);
        probe[i] = orig;
        let g = (hi - lo) / two_eps;
        if !g.is_finite() {
            return Err(Error::OracleFailure { coordinate: i });
        }
        grad.push(g);
    }
    Ok(grad.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);
        assert_eq!(matmul(&Matrix::zeros(2, 2), &b).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_row_times_column() {
        let a = m(&[&[1.0, 2.0]]);
        let b = m(&[&[3.0], &[4.0]]);
        // 1*3 + 2*4
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[11.0]]));
    }

    #[test]
    fn matmul_rejects_mismatched_shapes() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&m(&[&[0.0, 0.0, 0.0]]));
        for &v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&m(&[&[1f64.ln(), 3f64.ln()]]));
        assert!((s[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((s[(0, 1)] - 0.75).abs() < 1e-15);
        let s = softmax_rows(&m(&[&[1000.0, 0.0]]));
        assert!(s.all_finite());
        assert!((s[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(s[(0, 1)] < 1e-300);
    }

    #[test]
    fn mean_pool_examples() {
        assert_eq!(
            mean_pool(&m(&[&[1.0, 3.0], &[3.0, 5.0]])).unwrap().as_slice(),
            &[2.0, 4.0]
        );
        assert_eq!(mean_pool(&m(&[&[0.25, -7.0]])).unwrap().as_slice(), &[0.25, -7.0]);
        assert_eq!(mean_pool(&m(&[&[1.7], &[-1.7]])).unwrap().as_slice(), &[0.0]);
        assert!(matches!(mean_pool(&Matrix::<f64>::empty(2)), Err(Error::EmptyChunk)));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x: &[f64]| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_: &[f64]| 4.2, &[1.0, -2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let g = finite_diff_grad(|x: &[f64]| x.iter().sum(), &[0.3, 1.0, -5.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn finite_diff_rejects_bad_inputs() {
        assert!(finite_diff_grad(|x: &[f64]| x[0], &[1.0], 0.0).is_err());
        let r = finite_diff_grad(|x: &[f64]| 1.0 / (x[0] - 1e-5), &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::OracleFailure { coordinate: 0 })));
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64 * 0.11).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix<f64>> {
        (1usize..6, 1usize..9).prop_flat_map(|(r, c)| {
            prop::collection::vec(-50.0f64..50.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn dots_by_matches_dot_bitwise(
            dim in 1usize..40,
            rows in 0usize..11,
            seed in 0u64..1000,
        ) {
            let q: Vec<f64> = (0..dim).map(|i| ((i as u64 * 31 + seed) as f64).sin()).collect();
            let k = Matrix::from_fn(rows, dim, |r, c| ((r * 17 + c) as f64 * 0.37 + seed as f64).cos());
            let mut got = Vec::new();
            dots_by(&q, |j| k.row(j), 0..rows, &mut got);
            let want: Vec<u64> = k.row_iter().map(|r| dot(&q, r).to_bits()).collect();
            prop_assert_eq!(got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), want);
        }

        #[test]
        fn softmax_rows_sum_to_one(mat in matrix_strategy()) {
            let s = softmax_rows(&mat);
            prop_assert!(s.all_finite());
            for r in 0..s.rows() {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                for i in 0..s.cols() {
                    for j in 0..s.cols() {
                        if mat[(r, i)] > mat[(r, j)] {
                            prop_assert!(s[(r, i)] >= s[(r, j)]);
                        }
                    }
                }
            }
        }

        #[test]
        fn matmul_is_bitwise_deterministic(a in matrix_strategy(), seed in 0u64..1000) {
            let b = Matrix::from_fn(a.cols(), 3, |r, c| ((r * 7 + c) as f64 + seed as f64).sin());
            let x = matmul(&a, &b).unwrap();
            let y = matmul(&a, &b).unwrap();
            prop_assert_eq!(x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn mean_pool_of_power_of_two_copies_is_exact(
            row in prop::collection::vec(-1e6f64..1e6, 1..8),
            log_copies in 0u32..6,
        ) {
            let copies = 1usize << log_copies;
            let rows: Vec<Vec<f64>> = std::iter::repeat_n(row.clone(), copies).collect();
            let pooled = mean_pool(&Matrix::from_rows(&rows).unwrap()).unwrap();
            prop_assert_eq!(pooled.as_slice(), row.as_slice());
        }
    }
}
