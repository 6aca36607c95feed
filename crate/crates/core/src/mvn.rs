//! Dense symmetric matrices, Cholesky factorization and the multivariate
//! Gaussian in precision parameterization.
//!
//! Everything here works on the precision matrix directly. The sampler
//! produces `-H` (negated log-density Hessian) at every point, so factoring
//! it avoids ever forming a covariance.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Relative pivot threshold: a pivot must exceed this times the largest
/// diagonal entry of the input.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Dense symmetric matrix stored in full row-major form.
///
/// The lower triangle is authoritative on construction; the upper triangle is
/// mirrored from it so `get(i, j) == get(j, i)` holds bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, d) in diag.iter().enumerate() {
            m.data[i * diag.len() + i] = *d;
        }
        m
    }

    /// Builds from a row-major `dim * dim` buffer, mirroring the lower
    /// triangle into the upper one.
    pub fn from_row_major(dim: usize, entries: &[f64]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("matrix dimension must be positive".into()));
        }
        check_len(dim * dim, entries.len())?;
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("matrix entries must be finite".into()));
        }
        let mut data = entries.to_vec();
        for i in 0..dim {
            for j in 0..i {
                data[j * dim + i] = data[i * dim + j];
            }
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut flat = Vec::with_capacity(dim * dim);
        for r in rows {
            check_len(dim, r.len())?;
            flat.extend_from_slice(r);
        }
        Self::from_row_major(dim, &flat)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] += v;
        if i != j {
            self.data[j * self.dim + i] += v;
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn neg(&self) -> Self {
        self.scaled(-1.0)
    }

    pub fn add(&self, other: &SymMatrix) -> Result<Self> {
        check_len(self.dim, other.dim)?;
        Ok(Self {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &SymMatrix) -> Result<()> {
        check_len(self.dim, other.dim)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        (0..self.dim)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `xᵀ M x`
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Principal submatrix on the given (ordered) index set.
    pub fn principal_submatrix(&self, idx: &[usize]) -> Self {
        let k = idx.len();
        let mut data = Vec::with_capacity(k * k);
        for &i in idx {
            for &j in idx {
                data.push(self.get(i, j));
            }
        }
        Self { dim: k, data }
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = M`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    dim: usize,
    lower: Vec<f64>,
}

/// Factors a symmetric matrix. Fails with the (zero-based) pivot index where
/// positivity broke; pivots at or below `PIVOT_TOLERANCE * max diagonal` are
/// treated as failures.
pub fn cholesky(m: &SymMatrix) -> Result<CholeskyFactor> {
    let n = m.dim();
    let max_diag = (0..n).map(|i| m.get(i, i)).fold(f64::NEG_INFINITY, f64::max);
    if !(max_diag > 0.0) {
        return Err(Error::NotPositiveDefinite { pivot: 0 });
    }
    let threshold = PIVOT_TOLERANCE * max_diag;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = m.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > threshold) {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Ok(CholeskyFactor { dim: n, lower: l })
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn l(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.lower[i * n + k] * y[k];
            }
            y[i] = s / self.lower[i * n + i];
        }
        y
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.lower[k * n + i] * x[k];
            }
            x[i] = s / self.lower[i * n + i];
        }
        x
    }

    /// Solves `L Lᵀ x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `Lᵀ v`
    pub fn mul_upper(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim;
        (0..n)
            .map(|i| (i..n).map(|k| self.lower[k * n + i] * v[k]).sum())
            .collect()
    }

    /// `Σ log L_kk`, i.e. half the log-determinant of the factored matrix.
    pub fn half_log_det(&self) -> f64 {
        (0..self.dim).map(|i| self.l(i, i).ln()).sum()
    }

    pub fn reconstruct(&self) -> SymMatrix {
        let n = self.dim;
        let mut m = SymMatrix::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| self.l(i, k) * self.l(j, k)).sum();
                m.set(i, j, s);
            }
        }
        m
    }
}

/// Multivariate Gaussian parameterized by its mean and the Cholesky factor of
/// its precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MvnDistribution {
    mean: Vec<f64>,
    factor: CholeskyFactor,
}

impl MvnDistribution {
    pub fn new(mean: Vec<f64>, factor: CholeskyFactor) -> Result<Self> {
        check_len(factor.dim(), mean.len())?;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian mean".into()));
        }
        Ok(Self { mean, factor })
    }

    pub fn from_precision(mean: Vec<f64>, precision: &SymMatrix) -> Result<Self> {
        Self::new(mean, cholesky(precision)?)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn precision_factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    pub fn precision(&self) -> SymMatrix {
        self.factor.reconstruct()
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "point dimension must match distribution");
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let w = self.factor.mul_upper(&diff);
        let sq: f64 = w.iter().map(|v| v * v).sum();
        -0.5 * self.dim() as f64 * LN_2PI + self.factor.half_log_det() - 0.5 * sq
    }

    /// Draws `μ + L⁻ᵀ z` with `z` standard normal. Consumes exactly `dim`
    /// normal deviates from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with(&z)
    }

    /// Deterministic map from a standard-normal vector to a draw.
    pub fn sample_with(&self, z: &[f64]) -> Vec<f64> {
        let offset = self.factor.solve_upper(z);
        self.mean.iter().zip(offset).map(|(m, o)| m + o).collect()
    }
}
