//! Small dense matrices, symmetric eigenvalues and a banded LU factorization.
//!
//! Everything here is sized for state-estimation stages (a handful of rows)
//! plus one long banded system per solver iteration.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn diag(values: &[S]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Builds a matrix from row-major data. Panics if the length is wrong.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_major(&self) -> &[S] {
        &self.data
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul_vec(&self, v: &[S]) -> Vec<S> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                let row = &self.data[i * self.cols..(i + 1) * self.cols];
                row.iter().zip(v).map(|(a, b)| *a * *b).sum()
            })
            .collect()
    }

    /// `selfᵀ v`
    pub fn tr_mul_vec(&self, v: &[S]) -> Vec<S> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![S::zero(); self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j] = out[j] + self[(i, j)] * v[i];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == S::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] = out[(i, j)] + a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn scale(&self, s: S) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| *v * s).collect() }
    }

    /// `vᵀ self v` for a square matrix.
    pub fn quad_form(&self, v: &[S]) -> S {
        debug_assert!(self.is_square());
        let mv = self.mul_vec(v);
        dot(v, &mv)
    }

    pub fn max_abs_asymmetry(&self) -> S {
        let mut worst = S::zero();
        for i in 0..self.rows {
            for j in 0..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<S> Index<(usize, usize)> for Mat<S> {
    type Output = S;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S> IndexMut<(usize, usize)> for Mat<S> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

#[inline]
pub fn norm2<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

#[inline]
pub fn norm_inf<S: Scalar>(a: &[S]) -> S {
    a.iter().fold(S::zero(), |m, v| m.max(v.abs()))
}

#[inline]
pub fn norm1<S: Scalar>(a: &[S]) -> S {
    a.iter().fold(S::zero(), |m, v| m + v.abs())
}

pub fn sub<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(x, y)| *x - *y).collect()
}

pub fn add<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

/// Euclidean distance between two equally sized vectors.
pub fn dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum::<S>().sqrt()
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`, or `None` if `A` is
/// not (numerically) positive definite.
pub fn cholesky<S: Scalar>(a: &Mat<S>) -> Option<Mat<S>> {
    if !a.is_square() {
        return None;
    }
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d = d - l[(j, k)] * l[(j, k)];
        }
        if !(d > S::zero()) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues<S: Scalar>(a: &Mat<S>) -> Vec<S> {
    assert!(a.is_square());
    let n = a.rows();
    let mut m = a.clone();
    let eps = S::epsilon();
    for _sweep in 0..100 {
        let mut off = S::zero();
        let mut scale = S::zero();
        for i in 0..n {
            scale = scale + m[(i, i)] * m[(i, i)];
            for j in 0..n {
                if i != j {
                    off = off + m[(i, j)] * m[(i, j)];
                }
            }
        }
        if off <= eps * eps * (scale + off) || off == S::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == S::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (S::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<S> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Largest singular value (spectral norm).
pub fn spectral_norm<S: Scalar>(a: &Mat<S>) -> S {
    let ata = a.transpose().matmul(a);
    symmetric_eigenvalues(&ata).last().copied().unwrap_or(S::zero()).max(S::zero()).sqrt()
}

/// Solves a small dense system by Gaussian elimination with partial pivoting.
pub fn solve_dense<S: Scalar>(a: &Mat<S>, b: &[S]) -> Result<Vec<S>> {
    let n = a.rows();
    if !a.is_square() || b.len() != n {
        return Err(Error::Dimension(format!("dense solve {}x{} with rhs {}", a.rows(), a.cols(), b.len())));
    }
    let mut m = a.clone();
    let mut x = b.to_vec();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| m[(i, k)].abs().partial_cmp(&m[(j, k)].abs()).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap_or(k);
        if m[(p, k)].abs() <= S::min_positive_value() {
            return Err(Error::Singular("dense solve".into()));
        }
        if p != k {
            for j in 0..n {
                let t = m[(k, j)];
                m[(k, j)] = m[(p, j)];
                m[(p, j)] = t;
            }
            x.swap(k, p);
        }
        for i in k + 1..n {
            let l = m[(i, k)] / m[(k, k)];
            if l == S::zero() {
                continue;
            }
            for j in k..n {
                m[(i, j)] = m[(i, j)] - l * m[(k, j)];
            }
            x[i] = x[i] - l * x[k];
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s = s - m[(i, j)] * x[j];
        }
        x[i] = s / m[(i, i)];
    }
    Ok(x)
}

/// Square banded matrix with `kl` sub- and `ku` super-diagonals, stored with
/// `kl` extra super-diagonals of fill room for partial pivoting.
#[derive(Debug, Clone)]
pub struct BandedMatrix<S> {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<S>,
}

impl<S: Scalar> BandedMatrix<S> {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self { n, kl, ku, width, data: vec![S::zero(); n * width] }
    }

    /// Assembles from `(row, col, value)` triplets; duplicates are summed and
    /// the bandwidth is taken from the triplets themselves.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, S)]) -> Self {
        let mut kl = 0;
        let mut ku = 0;
        for &(i, j, _) in triplets {
            if i > j {
                kl = kl.max(i - j);
            } else {
                ku = ku.max(j - i);
            }
        }
        let mut m = Self::zeros(n, kl, ku);
        for &(i, j, v) in triplets {
            let cur = m.get(i, j);
            m.set(i, j, cur + v);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> Option<usize> {
        // row i holds columns [i - kl, i + kl + ku]
        if j + self.kl < i || j > i + self.kl + self.ku {
            None
        } else {
            Some(i * self.width + (j + self.kl - i))
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.offset(i, j).map_or(S::zero(), |o| self.data[o])
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        let o = self.offset(i, j).expect("entry outside band");
        self.data[o] = v;
    }

    /// `A x` using only the original band (valid before factorization).
    pub fn mul_vec(&self, x: &[S]) -> Vec<S> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.kl);
                let hi = (i + self.ku).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    /// LU factorization with partial pivoting, consuming the matrix.
    pub fn factor(mut self) -> Result<BandedLu<S>> {
        let n = self.n;
        let kl = self.kl;
        let ku = self.ku;
        let mut perm = vec![0usize; n];
        let mut max_abs = S::zero();
        for v in &self.data {
            max_abs = max_abs.max(v.abs());
        }
        let tiny = max_abs * S::epsilon() * S::lit(1e-3);
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=last_row {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > tiny) || !best.is_finite() {
                return Err(Error::Singular(format!("banded LU pivot {k} of {n}")));
            }
            perm[k] = p;
            let last_col = (k + kl + ku).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let a = self.get(k, j);
                    let b = self.get(p, j);
                    self.set(k, j, b);
                    self.set(p, j, a);
                }
            }
            let pivot = self.get(k, k);
            for i in k + 1..=last_row {
                let a_ik = self.get(i, k);
                if a_ik == S::zero() {
                    continue;
                }
                let l = a_ik / pivot;
                self.set(i, k, l);
                for j in k + 1..=last_col {
                    let u = self.get(k, j);
                    if u != S::zero() {
                        let cur = self.get(i, j);
                        self.set(i, j, cur - l * u);
                    }
                }
            }
        }
        Ok(BandedLu { lu: self, perm })
    }
}

/// Factorized banded matrix; reusable for several right-hand sides.
#[derive(Debug, Clone)]
pub struct BandedLu<S> {
    lu: BandedMatrix<S>,
    perm: Vec<usize>,
}

impl<S: Scalar> BandedLu<S> {
    pub fn solve(&self, b: &[S]) -> Vec<S> {
        let n = self.lu.n;
        let kl = self.lu.kl;
        let ku = self.lu.ku;
        let mut x = b.to_vec();
        for k in 0..n {
            let p = self.perm[k];
            if p != k {
                x.swap(k, p);
            }
            let xk = x[k];
            if xk == S::zero() {
                continue;
            }
            for i in k + 1..=(k + kl).min(n - 1) {
                x[i] = x[i] - self.lu.get(i, k) * xk;
            }
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..=(i + kl + ku).min(n - 1) {
                s = s - self.lu.get(i, j) * x[j];
            }
            x[i] = s / self.lu.get(i, i);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(cholesky(&a).is_none());
        let b = Mat::<f64>::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let l = cholesky(&b).unwrap();
        let llt = l.matmul(&l.transpose());
        for i in 0..2 {
            for j in 0..2 {
                assert!((llt[(i, j)] - b[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn jacobi_matches_closed_form_2x2() {
        let a = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]);
        let ev = symmetric_eigenvalues(&a);
        let mid = 2.5;
        let rad = (0.25f64 + 1.0).sqrt();
        assert!((ev[0] - (mid - rad)).abs() < 1e-12);
        assert!((ev[1] - (mid + rad)).abs() < 1e-12);
    }

    #[test]
    fn banded_lu_matches_dense_solve_on_saddle_system() {
        // symmetric indefinite tridiagonal-with-zeros system forcing pivoting
        let n = 9;
        let mut trip = Vec::new();
        for i in 0..n {
            let d = if i % 3 == 2 { 0.0 } else { 2.0 + i as f64 * 0.1 };
            trip.push((i, i, d));
            if i + 1 < n {
                trip.push((i, i + 1, 1.0));
                trip.push((i + 1, i, 1.0));
            }
            if i + 2 < n {
                trip.push((i, i + 2, -0.5));
                trip.push((i + 2, i, -0.5));
            }
        }
        let band = BandedMatrix::from_triplets(n, &trip);
        let mut dense = Mat::zeros(n, n);
        for &(i, j, v) in &trip {
            dense[(i, j)] += v;
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin() + 1.0).collect();
        let x_dense = solve_dense(&dense, &b).unwrap();
        let lu = band.factor().unwrap();
        let x_band = lu.solve(&b);
        for (a, c) in x_dense.iter().zip(&x_band) {
            assert!((a - c).abs() < 1e-12, "{a} vs {c}");
        }
    }

    #[test]
    fn banded_lu_detects_singular() {
        let trip = vec![(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)];
        assert!(BandedMatrix::from_triplets(2, &trip).factor().is_err());
    }

    #[test]
    fn spectral_norm_of_rotation_scaled() {
        let a = Mat::<f64>::from_rows(&[vec![0.0, -3.0], vec![3.0, 0.0]]);
        assert!((spectral_norm(&a) - 3.0).abs() < 1e-12);
    }
}
