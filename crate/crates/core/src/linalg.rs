//! Small dense linear algebra used by the readout and fusion layers.
//!
//! Only what the pipeline needs: a row-major matrix, instrumented Gram and
//! cross products, and a Cholesky solve. Every kernel reports its exact
//! multiply count.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension { expected: rows * cols, actual: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension { expected: cols, actual: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so special-case empty column counts.
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(if self.cols == 0 { 0 } else { self.rows })
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

    /// `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        self.row_iter().map(|r| dot(r, v)).collect()
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension { expected: self.cols, actual: other.rows });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), orow);
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Full `XᵀX`, computed as a sum of rank-one row updates.
///
/// Multiplies: `B·N²`.
pub fn gram(x: &Matrix) -> (Matrix, u64) {
    let n = x.cols;
    let mut g = Matrix::zeros(n, n);
    // Four rows per sweep halves the traffic through `g`.
    let mut rows = x.row_iter();
    loop {
        let r: Vec<&[f64]> = rows.by_ref().take(4).collect();
        if r.is_empty() {
            break;
        }
        for i in 0..n {
            let gi = &mut g.data[i * n..(i + 1) * n];
            match r.as_slice() {
                [a, b, c, d] => {
                    let (ai, bi, ci, di) = (a[i], b[i], c[i], d[i]);
                    for j in 0..n {
                        gi[j] += ai * a[j] + bi * b[j] + ci * c[j] + di * d[j];
                    }
                }
                rest => {
                    for row in rest {
                        axpy(row[i], row, gi);
                    }
                }
            }
        }
    }
    let macs = (x.rows * n * n) as u64;
    (g, macs)
}

/// `XᵀY`. Multiplies: `B·N·Q`.
pub fn cross(x: &Matrix, y: &Matrix) -> Result<(Matrix, u64)> {
    if x.rows != y.rows {
        return Err(Error::Dimension { expected: x.rows, actual: y.rows });
    }
    let (n, q) = (x.cols, y.cols);
    let mut out = Matrix::zeros(n, q);
    for (xr, yr) in x.row_iter().zip(y.row_iter()) {
        for (i, &xi) in xr.iter().enumerate() {
            axpy(xi, yr, &mut out.data[i * q..(i + 1) * q]);
        }
    }
    Ok((out, (x.rows * n * q) as u64))
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Factorises `a`. Multiplies: `Σ_j (j·(N−j) + j)`, about `N³/6`.
    pub fn factor(a: &Matrix) -> Result<(Self, u64)> {
        let n = a.rows;
        if a.cols != n {
            return Err(Error::Dimension { expected: n, actual: a.cols });
        }
        let mut l = Matrix::zeros(n, n);
        let mut macs = 0u64;
        for j in 0..n {
            let lj = l.row(j)[..j].to_vec();
            let d = a[(j, j)] - dot(&lj, &lj);
            macs += j as u64;
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Numeric(format!(
                    "matrix is not positive definite (pivot {j} = {d:e})"
                )));
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let s = a[(i, j)] - dot(&l.row(i)[..j], &lj);
                l[(i, j)] = s / djj;
            }
            macs += ((n - j - 1) * j) as u64;
        }
        Ok((Self { l }, macs))
    }

    /// Solves `A·X = B` for every column of `b`. Multiplies: `N²·Q`.
    pub fn solve(&self, b: &Matrix) -> Result<(Matrix, u64)> {
        let n = self.l.rows;
        if b.rows != n {
            return Err(Error::Dimension { expected: n, actual: b.rows });
        }
        let q = b.cols;
        let mut x = b.clone();
        let mut macs = 0u64;
        for c in 0..q {
            // forward: L·z = b
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= self.l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
            // backward: Lᵀ·x = z
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in i + 1..n {
                    s -= self.l[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
            macs += (n * (n - 1)) as u64;
        }
        Ok((x, macs))
    }
}
