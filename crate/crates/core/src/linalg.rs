//! Small dense complex matrix kernels.
//!
//! Everything here is sized for the per-frequency demixing problem, where
//! matrices are at most 8×8. LU with partial pivoting backs inversion,
//! column solves and the log-determinant.

use std::fmt;
use std::ops::{Index, IndexMut, Mul};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pivots smaller than this are treated as exact zeros.
pub const PIVOT_THRESHOLD: f64 = 1e-300;

pub type ComplexVector = Vec<Complex64>;

/// Dense row-major complex matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Self { rows, cols, data: vec![Complex64::new(0.0, 0.0); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for k in 0..n {
            m[(k, k)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_diag(diag: &[Complex64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (k, &d) in diag.iter().enumerate() {
            m[(k, k)] = d;
        }
        m
    }

    pub fn from_real_diag(diag: &[f64]) -> Self {
        let diag: Vec<_> = diag.iter().map(|&d| Complex64::new(d, 0.0)).collect();
        Self::from_diag(&diag)
    }

    /// Builds a matrix from row-major entries.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<Complex64>) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        assert_eq!(data.len(), rows * cols, "entry count does not match shape");
        Self { rows, cols, data }
    }

    pub fn from_real_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let data = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.len(), cols, "ragged rows");
                r.iter().map(|&x| Complex64::new(x, 0.0))
            })
            .collect();
        Self::from_row_major(rows.len(), cols, data)
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [Complex64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> ComplexVector {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn conj_transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)].conj();
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[Complex64]) -> ComplexVector {
        assert_eq!(v.len(), self.cols, "vector length does not match column count");
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&z| z * s).collect() }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.rows.min(self.cols)).map(|k| self[(k, k)]).sum()
    }

    /// Largest entrywise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Exact Hermitian check: every mirrored pair is bitwise conjugate.
    pub fn is_exactly_hermitian(&self) -> bool {
        self.is_square()
            && (0..self.rows).all(|r| (r..self.cols).all(|c| self[(r, c)] == self[(c, r)].conj()))
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        &mut self.data[r * self.cols + c]
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;

    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        let mut out = ComplexMatrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                for c in 0..rhs.cols {
                    out[(r, c)] += a * rhs[(k, c)];
                }
            }
        }
        out
    }
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for z in self.row(r) {
                write!(f, "{:+.6e}{:+.6e}i  ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

/// Packed LU factors with the row permutation applied during elimination.
struct Lu {
    n: usize,
    factors: Vec<Complex64>,
    perm: Vec<usize>,
}

impl Lu {
    fn decompose(m: &ComplexMatrix) -> Result<Self> {
        assert!(m.is_square(), "LU requires a square matrix");
        let n = m.rows;
        let mut a = m.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();

        for k in 0..n {
            let (pivot_row, pivot_mag) = (k..n)
                .map(|r| (r, a[r * n + k].norm()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pivot_mag >= PIVOT_THRESHOLD) {
                return Err(Error::SingularMatrix { column: k, pivot: pivot_mag.max(0.0) });
            }
            if pivot_row != k {
                for c in 0..n {
                    a.swap(k * n + c, pivot_row * n + c);
                }
                perm.swap(k, pivot_row);
            }
            let inv_pivot = a[k * n + k].inv();
            for r in k + 1..n {
                let factor = a[r * n + k] * inv_pivot;
                a[r * n + k] = factor;
                if factor != Complex64::new(0.0, 0.0) {
                    for c in k + 1..n {
                        let upper = a[k * n + c];
                        a[r * n + c] -= factor * upper;
                    }
                }
            }
        }
        Ok(Self { n, factors: a, perm })
    }

    /// Solves `M x = b` in place of a permuted copy of `b`.
    fn solve(&self, b: &[Complex64]) -> ComplexVector {
        let n = self.n;
        let a = &self.factors;
        let mut x: ComplexVector = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            let mut acc = x[r];
            for c in 0..r {
                acc -= a[r * n + c] * x[c];
            }
            x[r] = acc;
        }
        for r in (0..n).rev() {
            let mut acc = x[r];
            for c in r + 1..n {
                acc -= a[r * n + c] * x[c];
            }
            x[r] = acc / a[r * n + r];
        }
        x
    }
}

fn require_square(m: &ComplexMatrix) {
    assert!(m.is_square(), "expected a square matrix, got {}x{}", m.rows, m.cols);
}

/// Inverse via LU with partial pivoting.
pub fn invert(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    require_square(m);
    let n = m.rows;
    let lu = Lu::decompose(m)?;
    let mut out = ComplexMatrix::zeros(n, n);
    let mut e = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..n {
        e[c] = Complex64::new(1.0, 0.0);
        let col = lu.solve(&e);
        for r in 0..n {
            out[(r, c)] = col[r];
        }
        e[c] = Complex64::new(0.0, 0.0);
    }
    Ok(out)
}

/// Solves `M v = e_n` for a single unit right-hand side.
pub fn solve_column(m: &ComplexMatrix, n: usize) -> Result<ComplexVector> {
    require_square(m);
    assert!(n < m.rows, "unit vector index {n} out of range");
    let lu = Lu::decompose(m)?;
    let mut e = vec![Complex64::new(0.0, 0.0); m.rows];
    e[n] = Complex64::new(1.0, 0.0);
    Ok(lu.solve(&e))
}

/// General solve `M v = b`.
pub fn solve(m: &ComplexMatrix, b: &[Complex64]) -> Result<ComplexVector> {
    require_square(m);
    assert_eq!(b.len(), m.rows);
    Ok(Lu::decompose(m)?.solve(b))
}

/// `log|det M|`, accumulated from the LU pivots.
pub fn log_abs_det(m: &ComplexMatrix) -> Result<f64> {
    require_square(m);
    let lu = Lu::decompose(m)?;
    let n = lu.n;
    Ok((0..n).map(|k| lu.factors[k * n + k].norm().ln()).sum())
}

/// Returns `acc + weight * x x^H`.
///
/// Only the upper triangle is computed; the lower triangle is written as its
/// conjugate mirror and the diagonal is kept real, so a Hermitian input stays
/// exactly Hermitian.
pub fn hermitian_outer_accumulate(
    mut acc: ComplexMatrix,
    x: &[Complex64],
    weight: f64,
) -> ComplexMatrix {
    accumulate_outer_in_place(&mut acc, x, weight);
    acc
}

pub(crate) fn accumulate_outer_in_place(acc: &mut ComplexMatrix, x: &[Complex64], weight: f64) {
    require_square(acc);
    let n = acc.rows;
    assert_eq!(x.len(), n, "vector length does not match accumulator");
    for r in 0..n {
        let xr = x[r] * weight;
        acc[(r, r)].re += (xr * x[r].conj()).re;
        for c in r + 1..n {
            let v = acc[(r, c)] + xr * x[c].conj();
            acc[(r, c)] = v;
            acc[(c, r)] = v.conj();
        }
    }
}

/// `a^H M b`.
pub fn quadratic_form(a: &[Complex64], m: &ComplexMatrix, b: &[Complex64]) -> Complex64 {
    let mb = m.mul_vec(b);
    a.iter().zip(&mb).map(|(x, y)| x.conj() * y).sum()
}
