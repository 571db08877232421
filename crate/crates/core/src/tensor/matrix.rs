use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("Matrix::hstack rows", self.rows, other.rows));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Vertical concatenation.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(Error::dim("Matrix::vstack cols", self.cols, other.cols));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("Matrix::matmul", self.cols, other.rows));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dim("Matrix::matvec", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky factorization of a symmetric positive definite matrix, lower triangle.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dim("cholesky (square)", n, a.cols()));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NonFinite(format!(
                "cholesky: non-positive pivot {d:.3e} at {j}"
            )));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L L^T x = b` given the Cholesky factor.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Solve of a symmetric positive semidefinite system `G y = r`
/// with `r` in the range of `G`.
///
/// Uses a diagonally pivoted Cholesky and drops pivots below
/// `rel_tol * max(diag)`; the dropped indices are returned alongside the
/// solution (their components are zero).
pub fn psd_solve(g: &Matrix, r: &[f64], rel_tol: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = g.rows();
    if g.cols() != n {
        return Err(Error::dim("psd_solve (square)", n, g.cols()));
    }
    if r.len() != n {
        return Err(Error::dim("psd_solve rhs", n, r.len()));
    }
    let max_diag = (0..n).fold(0.0_f64, |m, i| m.max(g[(i, i)]));
    let floor = rel_tol * max_diag.max(f64::MIN_POSITIVE);

    // Right-looking factorization on a permuted copy; `perm[k]` is the
    // original index of pivot k. Column k of the lower triangle holds L.
    let mut a = g.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rank = 0;
    for k in 0..n {
        // Largest remaining diagonal; lowest position on ties.
        let mut best = k;
        for i in (k + 1)..n {
            if a[(i, i)] > a[(best, best)] {
                best = i;
            }
        }
        if a[(best, best)] <= floor {
            break;
        }
        if best != k {
            swap_sym(&mut a, k, best);
            perm.swap(k, best);
        }
        let d = a[(k, k)].sqrt();
        a[(k, k)] = d;
        for i in (k + 1)..n {
            a[(i, k)] /= d;
        }
        for i in (k + 1)..n {
            let lik = a[(i, k)];
            for j in (k + 1)..n {
                a[(i, j)] -= lik * a[(j, k)];
            }
        }
        rank += 1;
    }

    let rhs: Vec<f64> = perm.iter().map(|&p| r[p]).collect();
    let mut y = vec![0.0; rank];
    for i in 0..rank {
        let mut s = rhs[i];
        for k in 0..i {
            s -= a[(i, k)] * y[k];
        }
        y[i] = s / a[(i, i)];
    }
    for i in (0..rank).rev() {
        let mut s = y[i];
        for k in (i + 1)..rank {
            s -= a[(k, i)] * y[k];
        }
        y[i] = s / a[(i, i)];
    }
    let mut out = vec![0.0; n];
    for (k, &p) in perm.iter().enumerate().take(rank) {
        out[p] = y[k];
    }
    let mut dropped: Vec<usize> = perm[rank..].to_vec();
    dropped.sort_unstable();
    Ok((out, dropped))
}

// Symmetric row/column swap on the lower triangle (and the mirrored entries).
fn swap_sym(a: &mut Matrix, p: usize, q: usize) {
    let n = a.rows();
    for j in 0..n {
        let t = a[(p, j)];
        a[(p, j)] = a[(q, j)];
        a[(q, j)] = t;
    }
    for i in 0..n {
        let t = a[(i, p)];
        a[(i, p)] = a[(i, q)];
        a[(i, q)] = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[17.0, 39.0]);
        assert!(a.matmul(&a.transpose().select_rows(&[0])).is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn cholesky_solves_spd() {
        let a = Matrix::from_rows(&[
            vec![4.0, 2.0, 0.4],
            vec![2.0, 5.0, 1.0],
            vec![0.4, 1.0, 3.0],
        ])
        .unwrap();
        let l = cholesky(&a).unwrap();
        let x = cholesky_solve(&l, &[1.0, -2.0, 0.5]);
        let back = a.matvec(&x).unwrap();
        for (b, e) in back.iter().zip([1.0, -2.0, 0.5]) {
            assert!((b - e).abs() < 1e-12);
        }
    }

    #[test]
    fn psd_solve_handles_rank_deficiency() {
        // Rows r0 = (1,0), r1 = (1,0), r2 = (0,1): Gram matrix has rank 2.
        let rows = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let mut g = Matrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                g[(i, j)] = dot(&rows[i], &rows[j]);
            }
        }
        let v = [3.0, -1.0];
        let r: Vec<f64> = rows.iter().map(|row| dot(row, &v)).collect();
        let (y, dropped) = psd_solve(&g, &r, 1e-12).unwrap();
        assert_eq!(dropped.len(), 1);
        // A^T y must reproduce the projection of v onto the row space, which is v itself.
        let proj = [y[0] + y[1], y[2]];
        assert!((proj[0] - 3.0).abs() < 1e-12 && (proj[1] + 1.0).abs() < 1e-12);
    }
}
