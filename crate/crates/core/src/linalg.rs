//! Dense row-major matrices and the SPD kernels built on them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, RngStream};

/// Row-major `f64` matrix. Vectors are `n × 1` or `1 × n` matrices where a
/// matrix is needed; most vector APIs take plain slices.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Checked constructor: length must equal `rows * cols` and every entry
    /// must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "data length {} for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i}")));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        DenseMatrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = DenseMatrix::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        DenseMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn column(v: &[f64]) -> Self {
        DenseMatrix::from_raw(v.len(), 1, v.to_vec())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix::from_raw(idx.len(), self.cols, data)
    }

    /// Columns `[start, start + len)` as a new matrix.
    pub fn column_block(&self, start: usize, len: usize) -> DenseMatrix {
        let mut data = Vec::with_capacity(self.rows * len);
        for r in self.row_iter() {
            data.extend_from_slice(&r[start..start + len]);
        }
        DenseMatrix::from_raw(self.rows, len, data)
    }

    /// `[self | other]`.
    pub fn hcat(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "hcat of {} and {} rows",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(DenseMatrix::from_raw(self.rows, cols, data))
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(self.mismatch("matmul", other));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            (&self.data, self.cols as isize, 1),
            (&other.data, other.cols as isize, 1),
            0.0,
            &mut out,
        );
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.cols {
            return Err(self.mismatch("matmul_t", other));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            1.0,
            (&self.data, self.cols as isize, 1),
            (&other.data, 1, other.cols as isize),
            0.0,
            &mut out,
        );
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows {
            return Err(self.mismatch("t_matmul", other));
        }
        let mut out = DenseMatrix::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            1.0,
            (&self.data, 1, self.cols as isize),
            (&other.data, other.cols as isize, 1),
            0.0,
            &mut out,
        );
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "matvec of {}x{} with vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::DimensionMismatch(format!(
                "t_matvec of {}x{} with vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &s) in self.row_iter().zip(v) {
            axpy(s, r, &mut out);
        }
        Ok(out)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(self.mismatch("add", other));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(DenseMatrix::from_raw(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(self.mismatch("sub", other));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(DenseMatrix::from_raw(self.rows, self.cols, data))
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        DenseMatrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Symmetric within `rel_tol` relative to the largest entry.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let tol = rel_tol * self.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..self.rows {
            for j in 0..i {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// In-place `(S + Sᵀ) / 2`.
    pub fn symmetrize(&mut self) {
        let n = self.rows;
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                self.set(i, j, v);
                self.set(j, i, v);
            }
        }
    }

    fn mismatch(&self, op: &str, other: &DenseMatrix) -> Error {
        Error::DimensionMismatch(format!(
            "{op} of {}x{} and {}x{}",
            self.rows, self.cols, other.rows, other.cols
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: &mut DenseMatrix,
) {
    if m == 0 || n == 0 {
        return;
    }
    let ldc = c.cols as isize;
    // SAFETY: strides describe in-bounds row-major (or transposed) views of
    // buffers whose sizes were checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.data.as_mut_ptr(),
            ldc,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four accumulators keep the loop vectorizable without changing the
    // summation order between runs
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Lower Cholesky factor `L` with `L·Lᵀ = m`, no pivoting.
pub fn cholesky(m: &DenseMatrix) -> Result<DenseMatrix> {
    if !m.is_square() || m.rows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_symmetric(1e-10) {
        return Err(Error::InvalidConfig("cholesky input is not symmetric".into()));
    }
    let n = m.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = {
                let (li, lj) = (&l.data[i * n..i * n + j], &l.data[j * n..j * n + j]);
                m.get(i, j) - dot(li, lj)
            };
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::NotPositiveDefinite { pivot: i });
                }
                l.data[i * n + i] = s.sqrt();
            } else {
                l.data[i * n + j] = s / l.data[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Cholesky after adding `rel · trace / n` to the diagonal.
pub fn cholesky_jittered(m: &DenseMatrix, rel: f64) -> Result<DenseMatrix> {
    let n = m.rows();
    let jitter = rel * m.trace() / n.max(1) as f64;
    let mut mj = m.clone();
    for i in 0..n {
        let v = mj.get(i, i) + jitter;
        mj.set(i, i, v);
    }
    cholesky(&mj)
}

/// Solves `L·Lᵀ·x = rhs` for every column of `rhs`.
pub fn cholesky_solve(l: &DenseMatrix, rhs: &DenseMatrix) -> Result<DenseMatrix> {
    let n = l.rows();
    if rhs.rows() != n {
        return Err(Error::DimensionMismatch(format!(
            "solve with {n}x{n} factor and {} right-hand rows",
            rhs.rows()
        )));
    }
    let k = rhs.cols();
    // work on the transpose so each right-hand side is contiguous
    let mut x = rhs.transpose();
    for c in 0..k {
        let col = &mut x.data[c * n..(c + 1) * n];
        for i in 0..n {
            let s = col[i] - dot(&l.data[i * n..i * n + i], &col[..i]);
            col[i] = s / l.data[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = col[i];
            for j in i + 1..n {
                s -= l.data[j * n + i] * col[j];
            }
            col[i] = s / l.data[i * n + i];
        }
    }
    Ok(x.transpose())
}

/// Solves `m·x = rhs` for symmetric positive-definite `m`.
pub fn solve_spd(m: &DenseMatrix, rhs: &DenseMatrix) -> Result<DenseMatrix> {
    let l = cholesky(m)?;
    cholesky_solve(&l, rhs)
}

pub fn solve_spd_vec(m: &DenseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    Ok(solve_spd(m, &DenseMatrix::column(rhs))?.into_data())
}

/// `n` draws of `mean + L·u`, `u ~ N(0, I)`, one per row.
pub fn sample_mvn(
    mean: &[f64],
    chol_lower: &DenseMatrix,
    n: usize,
    rng: RngStream,
) -> Result<DenseMatrix> {
    let mut r = rng.rng();
    sample_mvn_with(mean, chol_lower, n, &mut r)
}

pub fn sample_mvn_with<R: Rng + ?Sized>(
    mean: &[f64],
    chol_lower: &DenseMatrix,
    n: usize,
    rng: &mut R,
) -> Result<DenseMatrix> {
    let d = mean.len();
    if chol_lower.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "mean of length {d} with a {}x{} factor",
            chol_lower.rows(),
            chol_lower.cols()
        )));
    }
    let mut u = DenseMatrix::zeros(n, d);
    fill_standard_normal(rng, u.data_mut());
    let mut out = u.matmul_t(chol_lower)?;
    for r in 0..n {
        for (o, m) in out.row_mut(r).iter_mut().zip(mean) {
            *o += m;
        }
    }
    Ok(out)
}

/// Sample covariance of the rows of `x` (divisor `n - 1`).
pub fn sample_covariance(x: &DenseMatrix) -> DenseMatrix {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    for r in x.row_iter() {
        axpy(1.0, r, &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = x.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    centered
        .t_matmul(&centered)
        .expect("same row count")
        .scale(1.0 / (n.max(2) - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn cholesky_small_cases() {
        assert_eq!(cholesky(&m(&[&[4.0]])).unwrap(), m(&[&[2.0]]));
        assert_eq!(cholesky(&DenseMatrix::identity(2)).unwrap(), DenseMatrix::identity(2));
        let a = m(&[&[4.0, 2.0], &[2.0, 5.0]]);
        let l = cholesky(&a).unwrap();
        assert!(l.max_abs_diff(&m(&[&[2.0, 0.0], &[1.0, 2.0]])) < 1e-15);
        let rebuilt = l.matmul_t(&l).unwrap();
        assert!(rebuilt.max_abs_diff(&a) < 1e-14);
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let a = m(&[&[1.0, 2.0], &[2.0, 1.0]]);
        match cholesky(&a) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(cholesky(&m(&[&[1.0, 0.5], &[0.4, 1.0]])).is_err());
    }

    #[test]
    fn solve_spd_cases() {
        let b = DenseMatrix::column(&[1.0, -2.0, 3.0]);
        assert_eq!(solve_spd(&DenseMatrix::identity(3), &b).unwrap(), b);
        assert!((solve_spd_vec(&m(&[&[2.0]]), &[6.0]).unwrap()[0] - 3.0).abs() < 1e-15);
        let a = m(&[&[4.0, 2.0], &[2.0, 5.0]]);
        let x = solve_spd_vec(&a, &[8.0, 9.0]).unwrap();
        let r = a.matvec(&x).unwrap();
        assert!((r[0] - 8.0).abs() < 1e-10 && (r[1] - 9.0).abs() < 1e-10);
    }

    #[test]
    fn mvn_degenerate_and_deterministic() {
        let mu = [1.5, -2.0];
        let s = sample_mvn(&mu, &DenseMatrix::zeros(2, 2), 5, RngStream::new(3)).unwrap();
        for r in s.row_iter() {
            assert_eq!(r, &mu);
        }
        let l = DenseMatrix::identity(2);
        let a = sample_mvn(&[0.0, 0.0], &l, 10, RngStream::new(9)).unwrap();
        let b = sample_mvn(&[0.0, 0.0], &l, 10, RngStream::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_mvn(&[0.0], &l, 1, RngStream::new(0)).is_err());
    }

    #[test]
    fn mvn_standard_mean_and_covariance() {
        let z = sample_mvn(&[0.0], &DenseMatrix::identity(1), 50_000, RngStream::new(1)).unwrap();
        let mean: f64 = z.data().iter().sum::<f64>() / 50_000.0;
        assert!(mean.abs() < 0.02);

        let c = m(&[&[4.0, 2.0], &[2.0, 5.0]]);
        let l = cholesky(&c).unwrap();
        let x = sample_mvn(&[0.0, 0.0], &l, 100_000, RngStream::new(2)).unwrap();
        let cov = sample_covariance(&x);
        for i in 0..2 {
            for j in 0..2 {
                let rel = (cov.get(i, j) - c.get(i, j)).abs() / c.get(i, j);
                assert!(rel < 0.05, "cov[{i},{j}] = {}", cov.get(i, j));
            }
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = m(&[&[0.5, -1.0, 2.0], &[1.0, 0.0, -3.0]]);
        assert_eq!(a.matmul_t(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
        assert_eq!(a.t_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
        assert_eq!(a.t_matvec(&[1.0, 2.0]).unwrap(), vec![9.0, 12.0, 15.0]);
    }

    fn lower_factor(n: usize) -> impl Strategy<Value = DenseMatrix> {
        proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
            let mut l = DenseMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..i {
                    l.set(i, j, v[i * n + j]);
                }
                l.set(i, i, 0.5 + v[i * n + i].abs());
            }
            l
        })
    }

    proptest! {
        #[test]
        fn cholesky_inverts_lower_products(l in (1usize..7).prop_flat_map(lower_factor)) {
            let a = l.matmul_t(&l).unwrap();
            let back = cholesky(&a).unwrap();
            prop_assert!(back.max_abs_diff(&l) < 1e-8);
            let rebuilt = back.matmul_t(&back).unwrap();
            prop_assert!(rebuilt.sub(&a).unwrap().frobenius_norm() <= 1e-8 * a.frobenius_norm());
        }
    }
}
