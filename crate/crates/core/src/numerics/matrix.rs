use std::ops::{Index, IndexMut};

use super::Real;
use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
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

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn transpose(&self) -> Self {
        const TILE: usize = 16;
        let (r, c) = (self.rows, self.cols);
        let mut out = Self::zeros(c, r);
        for i0 in (0..r).step_by(TILE) {
            for j0 in (0..c).step_by(TILE) {
                for i in i0..(i0 + TILE).min(r) {
                    let src = &self.data[i * c..(i + 1) * c];
                    for j in j0..(j0 + TILE).min(c) {
                        out.data[j * r + i] = src[j];
                    }
                }
            }
        }
        out
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self { data, ..*self })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self { data, ..*self })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.rows)
            .map(|i| self.row(i).iter().copied().sum())
            .collect()
    }

    /// Sums over rows, giving a `1 x cols` matrix.
    pub fn column_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Dense product `self · b`.
    ///
    /// Every output entry accumulates over the inner index in increasing
    /// order, so results are bit-reproducible.
    pub fn matmul(&self, b: &Self) -> Result<Self> {
        if self.cols != b.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: b.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, b.cols);
        let mut out = Self::zeros(m, n);
        gemm(&self.data, &b.data, &mut out.data, m, k, n);
        Ok(out)
    }

    /// `selfᵀ · b` without materializing the transpose.
    pub fn matmul_tn(&self, b: &Self) -> Result<Self> {
        if self.rows != b.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                left: self.shape(),
                right: b.shape(),
            });
        }
        self.transpose().matmul(b)
    }

    /// `self · bᵀ`.
    pub fn matmul_nt(&self, b: &Self) -> Result<Self> {
        if self.cols != b.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(),
                right: b.shape(),
            });
        }
        self.matmul(&b.transpose())
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows {
            softmax_in_place(out.row_mut(i));
        }
        out
    }

    /// Scales each row so its entries sum to one. Signed rows are replaced by
    /// their absolute values first.
    ///
    /// Rows whose sum is already one up to accumulated rounding are left
    /// untouched, which makes the operation exactly idempotent.
    pub fn row_normalize(&self) -> Result<Self> {
        let mut out = self.clone();
        let slack = T::epsilon() * T::from_f64(2.0 * self.cols.max(1) as f64);
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let signed = row.iter().any(|v| *v < T::zero());
            if signed {
                row.iter_mut().for_each(|v| *v = v.abs());
            }
            let total: T = row.iter().copied().sum();
            if total == T::zero() || !total.is_finite() {
                return Err(Error::ZeroRow { row: i });
            }
            if (total - T::one()).abs() <= slack {
                continue;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(out)
    }
}

const ROWS: usize = 8;
const LANES: usize = 16;

/// `out += a · b` for row-major `a` (`m x k`) and `b` (`k x n`).
///
/// Register-blocked over 8 output rows and 16 columns; every output entry
/// still sums over `p = 0..k` in increasing order, so the result does not
/// depend on the blocking.
fn gemm<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let full_cols = n - n % LANES;
    let full_rows = m - m % ROWS;
    for i in (0..full_rows).step_by(ROWS) {
        for j in (0..full_cols).step_by(LANES) {
            let mut acc = [[T::zero(); LANES]; ROWS];
            for p in 0..k {
                let b_row: &[T; LANES] = b[p * n + j..p * n + j + LANES].try_into().expect("lanes");
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for (o, &bv) in acc_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                let o = &mut out[(i + r) * n + j..(i + r) * n + j + LANES];
                for (o, &v) in o.iter_mut().zip(acc_row) {
                    *o += v;
                }
            }
        }
    }
    // leftover columns of the blocked rows, then leftover rows in full
    let axpy_rows = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, out: &mut [T]| {
        if cols.is_empty() {
            return;
        }
        for i in rows {
            let o = &mut out[i * n + cols.start..i * n + cols.end];
            for p in 0..k {
                let av = a[i * k + p];
                for (o, &bv) in o.iter_mut().zip(&b[p * n + cols.start..p * n + cols.end]) {
                    *o += av * bv;
                }
            }
        }
    };
    axpy_rows(0..full_rows, full_cols..n, out);
    axpy_rows(full_rows..m, 0..n, out);
}

/// Numerically stable softmax of a slice in place.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows)
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);

        let p = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(p.matmul(&b).unwrap(), m(&[&[5.0, 6.0], &[0.0, 0.0]]));

        let row = m(&[&[1.0, 1.0, 1.0]]);
        let col = m(&[&[2.0], &[3.0], &[4.0]]);
        assert_eq!(row.matmul(&col).unwrap(), m(&[&[9.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = Rng::new(3);
        let a = random(&mut rng, 5, 3);
        let b = random(&mut rng, 5, 4);
        let c = random(&mut rng, 2, 3);
        let tn = a.matmul_tn(&b).unwrap();
        let direct = a.transpose().matmul(&b).unwrap();
        assert!(tn.max_abs_diff(&direct).unwrap() < 1e-12);
        let nt = c.matmul_nt(&a).unwrap();
        let direct = c.matmul(&a.transpose()).unwrap();
        assert!(nt.max_abs_diff(&direct).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = m(&[&[0.0, 0.0]]).softmax_rows();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        let s = m(&[&[1000.0, 1000.0, 1000.0]]).softmax_rows();
        for &v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = m(&[&[2f64.ln(), 0.0]]).softmax_rows();
        assert!((s[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn row_normalize_examples() {
        let a = m(&[&[0.5, 0.5]]);
        assert_eq!(a.row_normalize().unwrap(), a);
        let b = m(&[&[1.0, 1.0], &[2.0, 6.0]]);
        assert_eq!(b.row_normalize().unwrap(), m(&[&[0.5, 0.5], &[0.25, 0.75]]));
        assert_eq!(
            m(&[&[2.0, 0.0, 0.0]]).row_normalize().unwrap(),
            m(&[&[1.0, 0.0, 0.0]])
        );
        // signed rows normalize absolute values
        assert_eq!(
            m(&[&[-1.0, 3.0]]).row_normalize().unwrap(),
            m(&[&[0.25, 0.75]])
        );
    }

    #[test]
    fn row_normalize_zero_row_reports_index() {
        let z = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        match z.row_normalize() {
            Err(Error::ZeroRow { row }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix<f64> {
        let data = (0..r * c).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let a = random(&mut rng, 4, 4);
            let b = random(&mut rng, 4, 4);
            let c = random(&mut rng, 4, 4);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right).unwrap() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(5);
        for _ in 0..1000 {
            let r = 1 + rng.below(6);
            let c = 1 + rng.below(12);
            let data = (0..r * c)
                .map(|_| rng.uniform_in(-50.0, 50.0) as f32)
                .collect();
            let s = Matrix::from_vec(r, c, data).unwrap().softmax_rows();
            for sum in s.row_sums() {
                assert!((sum - 1.0).abs() < 1e-6, "{sum}");
            }
        }
    }

    proptest! {
        #[test]
        fn row_normalize_idempotent(
            data in proptest::collection::vec(0.01f64..100.0, 12)
        ) {
            let a = Matrix::from_vec(3, 4, data).unwrap();
            let once = a.row_normalize().unwrap();
            let twice = once.row_normalize().unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
