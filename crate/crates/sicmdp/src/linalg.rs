//! Small dense linear algebra helpers: LU solves and matrix inversion with
//! partial pivoting. Systems in scope have at most a few hundred unknowns,
//! so dense direct methods are both fast enough and deterministic.

use crate::error::SicmdpError;

/// Dense row-major matrix.
#[derive(Clone, Debug)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, SicmdpError> {
    let n = a.rows;
    assert_eq!(a.cols, n);
    assert_eq!(b.len(), n);
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut pivot = col;
        let mut best = m[col * n + col].abs();
        for r in col + 1..n {
            let v = m[r * n + col].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best < 1e-14 {
            return Err(SicmdpError::SingularSystem(format!(
                "pivot {best:.3e} at column {col}"
            )));
        }
        if pivot != col {
            for c in 0..n {
                m.swap(col * n + c, pivot * n + c);
            }
            x.swap(col, pivot);
        }
        let inv = 1.0 / m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] * inv;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[r * n + c] -= f * m[col * n + c];
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        x[col] /= m[col * n + col];
        for r in 0..col {
            x[r] -= m[r * n + col] * x[col];
        }
    }
    Ok(x)
}

/// Inverts a square matrix by Gauss-Jordan elimination with partial pivoting.
pub fn invert(a: &Matrix) -> Result<Matrix, SicmdpError> {
    let n = a.rows;
    assert_eq!(a.cols, n);
    let mut m = a.data.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let mut pivot = col;
        let mut best = m[col * n + col].abs();
        for r in col + 1..n {
            let v = m[r * n + col].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best < 1e-14 {
            return Err(SicmdpError::SingularSystem(format!(
                "pivot {best:.3e} at column {col}"
            )));
        }
        if pivot != col {
            for c in 0..n {
                m.swap(col * n + c, pivot * n + c);
                inv.data.swap(col * n + c, pivot * n + c);
            }
        }
        let f = 1.0 / m[col * n + col];
        for c in 0..n {
            m[col * n + c] *= f;
            inv.data[col * n + c] *= f;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                m[r * n + c] -= f * m[col * n + c];
                inv.data[r * n + c] -= f * inv.data[col * n + c];
            }
        }
    }
    Ok(inv)
}

/// Residual `max_i |A x - b|_i`, for post-solve verification.
pub fn residual(a: &Matrix, x: &[f64], b: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..a.rows {
        let mut acc = 0.0;
        let row = a.row(r);
        for (c, &xc) in x.iter().enumerate() {
            acc += row[c] * xc;
        }
        worst = worst.max((acc - b[r]).abs());
    }
    worst
}
