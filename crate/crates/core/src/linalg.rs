//! Dense vector and matrix kernels.
//!
//! All reductions run left to right over the coordinate index so that results
//! are bit-identical regardless of how many worker threads evaluate clients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of aggregation weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Squared-norm threshold (per coordinate) below which a projection base is
/// treated as zero.
pub const PROJ_TAU_PER_DIM: f64 = 1e-14;

/// A model parameter point in R^d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(entries: Vec<f64>) -> Self {
        ParamVector(entries)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    fn check_dim(&self, other: &ParamVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(dot_slices(&self.0, &other.0))
    }

    pub fn norm_sq(&self) -> f64 {
        dot_slices(&self.0, &self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        self.check_dim(x)?;
        for (y, xi) in self.0.iter_mut().zip(&x.0) {
            *y += a * xi;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for y in &mut self.0 {
            *y *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn dist_sq(&self, other: &ParamVector) -> Result<f64> {
        Ok(self.sub(other)?.norm_sq())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// `Σ weights[i] * vectors[i]`, for nonnegative weights summing to one.
pub fn weighted_sum(vectors: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if vectors.is_empty() {
        return Err(Error::Weight("empty vector list".into()));
    }
    if vectors.len() != weights.len() {
        return Err(Error::Dimension {
            expected: vectors.len(),
            actual: weights.len(),
        });
    }
    let dim = vectors[0].dim();
    for v in vectors {
        if v.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                actual: v.dim(),
            });
        }
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::Weight(format!("weight {w} is negative or not finite")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Weight(format!("weights sum to {total}, not 1")));
    }
    let mut out = vec![0.0; dim];
    for (v, &w) in vectors.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(&v.0) {
            *o += w * x;
        }
    }
    Ok(ParamVector(out))
}

/// Projection threshold for a d-dimensional base vector.
pub fn projection_tau(dim: usize) -> f64 {
    PROJ_TAU_PER_DIM * dim as f64
}

/// Component of `h` orthogonal to `g`: `h - (<h,g>/<g,g>) g`.
///
/// When `‖g‖²` is at or below [`projection_tau`] the base is treated as zero
/// and `h` is returned unchanged. A second Gram-Schmidt pass removes the
/// rounding residue of the first, so the result is orthogonal to `g` relative
/// to its own norm even when `h` is nearly parallel to `g`.
pub fn orth_residual(h: &ParamVector, g: &ParamVector) -> Result<ParamVector> {
    h.check_dim(g)?;
    let gg = g.norm_sq();
    if gg <= projection_tau(g.dim()) {
        return Ok(h.clone());
    }
    let mut r = h.clone();
    for _ in 0..2 {
        let c = r.dot(g)? / gg;
        if c == 0.0 {
            break;
        }
        r.axpy(-c, g)?;
    }
    Ok(r)
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Dimension {
                expected: self.cols,
                actual: x.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot_slices(self.row(i), x)).collect())
    }

    /// `Aᵀ y`.
    pub fn tmul_vec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::Dimension {
                expected: self.rows,
                actual: y.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, yi) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        Ok(out)
    }

    /// `AᵀA` (d×d, symmetric).
    pub fn gram(&self) -> Matrix {
        let d = self.cols;
        let mut g = Matrix::zeros(d, d);
        for i in 0..self.rows {
            let r = self.row(i);
            for j in 0..d {
                for k in j..d {
                    g.data[j * d + k] += r[j] * r[k];
                }
            }
        }
        for j in 0..d {
            for k in 0..j {
                g.data[j * d + k] = g.data[k * d + j];
            }
        }
        g
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension {
                expected: self.rows * self.cols,
                actual: other.rows * other.cols,
            });
        }
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
        Ok(())
    }

    pub fn scaled(&self, a: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| a * x).collect(),
        }
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

/// Smallest and largest eigenvalues of a symmetric matrix.
pub fn sym_eigen_extremes(m: &Matrix) -> (f64, f64) {
    if m.rows == 0 {
        return (0.0, 0.0);
    }
    let eig = m.to_nalgebra().symmetric_eigen();
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Spectral norm of a symmetric matrix.
pub fn sym_spectral_norm(m: &Matrix) -> f64 {
    let (lo, hi) = sym_eigen_extremes(m);
    lo.abs().max(hi.abs())
}

/// Solves `M x = rhs` for symmetric positive definite `M`, followed by one
/// step of iterative refinement.
pub fn solve_spd(m: &Matrix, rhs: &[f64]) -> Result<Vec<f64>> {
    if m.rows != m.cols || rhs.len() != m.rows {
        return Err(Error::Dimension {
            expected: m.rows,
            actual: rhs.len(),
        });
    }
    let a = m.to_nalgebra();
    let b = DVector::from_column_slice(rhs);
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("normal equations are not positive definite".into()))?;
    let mut x = chol.solve(&b);
    let resid = &b - &a * &x;
    x += chol.solve(&resid);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem("non-finite solution".into()));
    }
    Ok(x.iter().cloned().collect())
}
