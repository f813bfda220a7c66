//! Small dense linear algebra for square, symmetric matrices.
//!
//! The lab works at desk scale (dimension capped at [`MAX_DIM`]) so plain
//! row-major `Vec<f64>` storage is enough.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the parameter dimension accepted by validation.
pub const MAX_DIM: usize = 4096;

/// Absolute per-entry tolerance for the symmetry check.
pub const SYMMETRY_TOL: f64 = 1e-12;

const POWER_REL_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// Square matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidModel(format!(
                    "matrix row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            data.extend(row);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("matrix has non-finite entries".into()));
        }
        Ok(Self { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data
            .chunks(self.n.max(1))
            .take(self.n)
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n);
        self.data
            .chunks_exact(self.n.max(1))
            .take(self.n)
            .map(|row| dot(row, x))
            .collect()
    }

    /// `xᵀ M x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    /// `P M Pᵀ` for the permutation sending coordinate `i` to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[perm[i] * n + perm[j]] = self.get(i, j);
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (i + 1..self.n).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= SYMMETRY_TOL))
    }

    /// Positive-semidefiniteness via Cholesky with full diagonal pivoting.
    ///
    /// Factorisation stops once the largest remaining pivot is below a scaled
    /// tolerance; the matrix is PSD iff the remaining Schur complement is
    /// numerically zero at that point.
    pub fn is_positive_semidefinite(&self) -> bool {
        let n = self.n;
        if n == 0 {
            return true;
        }
        let scale = self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
        let tol = 1e-10 * scale * n as f64;
        let mut s = self.data.clone();
        let mut remaining: Vec<usize> = (0..n).collect();
        while !remaining.is_empty() {
            let (pos, &p) = remaining
                .iter()
                .enumerate()
                .max_by(|a, b| s[a.1 * n + a.1].total_cmp(&s[b.1 * n + b.1]))
                .expect("non-empty");
            let pivot = s[p * n + p];
            if pivot <= tol {
                return remaining
                    .iter()
                    .all(|&i| s[i * n + i] >= -tol && remaining.iter().all(|&j| s[i * n + j].abs() <= tol));
            }
            remaining.swap_remove(pos);
            for &i in &remaining {
                let f = s[i * n + p] / pivot;
                for &j in &remaining {
                    s[i * n + j] -= f * s[p * n + j];
                }
            }
        }
        true
    }

    /// Largest eigenvalue of a symmetric PSD matrix by power iteration.
    ///
    /// Converges when the Rayleigh quotient changes by less than `1e-10`
    /// relative between iterations, giving up after 10,000 iterations.
    pub fn largest_eigenvalue(&self) -> Result<f64> {
        let n = self.n;
        if n == 0 {
            return Ok(0.0);
        }
        // Irregular start vector so it is not orthogonal to the leading eigenvector
        // of any matrix with structured sparsity.
        let mut v: Vec<f64> = (0..n)
            .map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract())
            .collect();
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let rayleigh = |v: &[f64]| self.quad_form(v) / dot(v, v);
        let mut lambda = rayleigh(&v);
        for _ in 0..POWER_MAX_ITERS {
            let w = self.mul_vec(&v);
            let nw = norm(&w);
            if nw == 0.0 {
                return Ok(0.0);
            }
            v = w.into_iter().map(|x| x / nw).collect();
            let next = rayleigh(&v);
            if (next - lambda).abs() <= POWER_REL_TOL * next.abs() {
                return Ok(next);
            }
            lambda = next;
        }
        Err(Error::ConvergenceFailure {
            iterations: POWER_MAX_ITERS,
        })
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.rows()
    }
}
