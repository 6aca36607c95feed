//! Differentiable log-density targets.
//!
//! Every target returns its log-density up to an additive constant; the
//! dropped constant is documented on each type. Values are therefore only
//! comparable within one target.

use std::ops::AddAssign;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::mvn::{cholesky, SymMatrix};

/// Evaluation counters. One `evaluate` call that requests the Hessian counts
/// one value, one gradient and one Hessian.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCost {
    pub n_value: u64,
    pub n_gradient: u64,
    pub n_hessian: u64,
}

impl EvalCost {
    pub fn for_parts(parts: Parts) -> Self {
        match parts {
            Parts::Value => Self { n_value: 1, n_gradient: 0, n_hessian: 0 },
            Parts::Gradient => Self { n_value: 1, n_gradient: 1, n_hessian: 0 },
            Parts::Hessian => Self { n_value: 1, n_gradient: 1, n_hessian: 1 },
        }
    }
}

impl AddAssign for EvalCost {
    fn add_assign(&mut self, o: Self) {
        self.n_value += o.n_value;
        self.n_gradient += o.n_gradient;
        self.n_hessian += o.n_hessian;
    }
}

impl std::ops::Add for EvalCost {
    type Output = EvalCost;
    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

/// Which derivatives to compute. Each level implies the ones below it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Parts {
    Value,
    Gradient,
    Hessian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub value: f64,
    pub gradient: Option<Vec<f64>>,
    pub hessian: Option<SymMatrix>,
    pub cost: EvalCost,
}

impl EvalResult {
    pub fn gradient(&self) -> &[f64] {
        self.gradient.as_deref().expect("gradient was not requested")
    }

    pub fn hessian(&self) -> &SymMatrix {
        self.hessian.as_ref().expect("Hessian was not requested")
    }

    fn restrict(self, block: &[usize]) -> Self {
        EvalResult {
            value: self.value,
            gradient: self.gradient.map(|g| block.iter().map(|&i| g[i]).collect()),
            hessian: self.hessian.map(|h| h.principal_submatrix(block)),
            cost: self.cost,
        }
    }
}

/// A log-density `f: R^dim -> R` with gradient and Hessian.
pub trait DifferentiableTarget: Send + Sync {
    fn dim(&self) -> usize;

    fn evaluate(&self, x: &[f64], parts: Parts) -> Result<EvalResult>;

    /// Evaluates at the full point `x`, returning the gradient restricted to
    /// `block` and the principal Hessian submatrix on `block`.
    ///
    /// Implementations override this when the restricted derivatives are
    /// cheaper than the full ones.
    fn evaluate_block(&self, x: &[f64], block: &[usize], parts: Parts) -> Result<EvalResult> {
        Ok(self.evaluate(x, parts)?.restrict(block))
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.evaluate(x, Parts::Value)?.value)
    }
}

impl<T: DifferentiableTarget + ?Sized> DifferentiableTarget for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn evaluate(&self, x: &[f64], parts: Parts) -> Result<EvalResult> {
        (**self).evaluate(x, parts)
    }
    fn evaluate_block(&self, x: &[f64], block: &[usize], parts: Parts) -> Result<EvalResult> {
        (**self).evaluate_block(x, block, parts)
    }
}

impl<T: DifferentiableTarget + ?Sized> DifferentiableTarget for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn evaluate(&self, x: &[f64], parts: Parts) -> Result<EvalResult> {
        (**self).evaluate(x, parts)
    }
    fn evaluate_block(&self, x: &[f64], block: &[usize], parts: Parts) -> Result<EvalResult> {
        (**self).evaluate_block(x, block, parts)
    }
}

impl<T: DifferentiableTarget + ?Sized> DifferentiableTarget for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn evaluate(&self, x: &[f64], parts: Parts) -> Result<EvalResult> {
        (**self).evaluate(x, parts)
    }
    fn evaluate_block(&self, x: &[f64], block: &[usize], parts: Parts) -> Result<EvalResult> {
        (**self).evaluate_block(x, block, parts)
    }
}

/// One-dimensional target that also exposes its third derivative.
pub trait UnivariateTargetWithThird: DifferentiableTarget {
    fn third_derivative(&self, x: f64) -> f64;
}

/// `log(1 + e^t)` without overflow.
#[inline]
pub fn log1pexp(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

#[inline]
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Dense row-major `rows x cols` real matrix used for designs.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len(rows * cols, data.len())?;
        if cols == 0 {
            return Err(Error::InvalidArgument("design must have at least one column".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("design entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { rows: n, cols: n, data }
    }

    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn mul_vec(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), beta)).collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Numerical column rank from a column-pivoted QR factorization: the
    /// number of `|R_kk|` above `1e-10 * ‖X‖_F`.
    pub fn column_rank(&self) -> usize {
        let tol = RANK_TOLERANCE * self.frobenius_norm();
        let r = self.to_dmatrix().col_piv_qr().r();
        (0..r.nrows().min(r.ncols())).filter(|&k| r[(k, k)].abs() > tol).count()
    }

    pub fn is_full_column_rank(&self) -> bool {
        self.column_rank() == self.cols
    }

    /// Orthonormal basis (as columns, returned as vectors) of the null space,
    /// from the eigenvectors of `XᵀX` with eigenvalues below tolerance.
    pub fn null_space_basis(&self) -> Vec<Vec<f64>> {
        let x = self.to_dmatrix();
        let gram = x.transpose() * &x;
        let eig = SymmetricEigen::new(gram);
        let scale = self.frobenius_norm().powi(2).max(f64::MIN_POSITIVE);
        let tol = (RANK_TOLERANCE * RANK_TOLERANCE).max(1e-14) * scale;
        (0..self.cols)
            .filter(|&k| eig.eigenvalues[k].abs() <= tol)
            .map(|k| eig.eigenvectors.column(k).iter().copied().collect())
            .collect()
    }
}

pub const RANK_TOLERANCE: f64 = 1e-10;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_parts_point(dim: usize, x: &[f64]) -> Result<()> {
    check_len(dim, x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite coordinate".into()));
    }
    Ok(())
}

/// Bernoulli-logit log-likelihood `Σ y_i η_i − log(1 + e^{η_i})`,
/// `η = Xβ`. No constant is dropped.
#[derive(Debug, Clone)]
pub struct LogisticTarget {
    x: DesignMatrix,
    y: Vec<f64>,
}

impl LogisticTarget {
    pub fn new(x: DesignMatrix, y: Vec<u8>) -> Result<Self> {
        check_len(x.rows(), y.len())?;
        if let Some(bad) = y.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("response must be 0 or 1, got {bad}")));
        }
        Ok(Self {
            x,
            y: y.into_iter().map(f64::from).collect(),
        })
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.x
    }

    pub fn response(&self) -> Vec<u8> {
        self.y.iter().map(|&v| v as u8).collect()
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    fn eval_impl(&self, beta: &[f64], block: Option<&[usize]>, parts: Parts) -> Result<EvalResult> {
        check_parts_point(self.x.cols(), beta)?;
        let all: Vec<usize>;
        let idx = match block {
            Some(b) => b,
            None => {
                all = (0..self.x.cols()).collect();
                &all
            }
        };
        let k = idx.len();
        let mut value = 0.0;
        let mut grad = vec![0.0; if parts >= Parts::Gradient { k } else { 0 }];
        let mut hess = vec![0.0; if parts >= Parts::Hessian { k * k } else { 0 }];
        let mut xb = vec![0.0; k];
        for i in 0..self.x.rows() {
            let row = self.x.row(i);
            let eta = dot(row, beta);
            let y = self.y[i];
            // −[(1−y)η + log(1+e^{−η})] in overflow-safe form
            value += y * eta - log1pexp(eta);
            if parts == Parts::Value {
                continue;
            }
            let s = logistic(eta);
            for (a, &j) in idx.iter().enumerate() {
                xb[a] = row[j];
            }
            let r = y - s;
            for a in 0..k {
                grad[a] += r * xb[a];
            }
            if parts == Parts::Hessian {
                let w = s * (1.0 - s);
                for a in 0..k {
                    let wa = w * xb[a];
                    let h = &mut hess[a * k..a * k + a + 1];
                    for (b, hv) in h.iter_mut().enumerate() {
                        *hv -= wa * xb[b];
                    }
                }
            }
        }
        if !value.is_finite() {
            return Err(Error::Domain("logistic log-likelihood overflowed".into()));
        }
        let hessian = if parts == Parts::Hessian {
            Some(SymMatrix::from_row_major(k, &hess)?)
        } else {
            None
        };
        Ok(EvalResult {
            value,
            gradient: (parts >= Parts::Gradient).then_some(grad),
            hessian,
            cost: EvalCost::for_parts(parts),
        })
    }
}

impl DifferentiableTarget for LogisticTarget {
    fn dim(&self) -> usize {
        self.x.cols()
    }

    fn evaluate(&self, x: &[f64], parts: Parts) -> Result<EvalResult> {
        self.eval_impl(x, None, parts)
    }

    fn evaluate_block(&self, x: &[f64], block: &[usize], parts: Parts) -> Result<EvalResult> {
        self.eval_impl(x, Some(block), parts)
    }
}

/// Poisson log-likelihood in the log-rate `u = log λ`:
/// `f(u) = Σ_i (y_i u − e^u)`, dropping `−Σ log y_i!`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonLogRate {
    sum_y: f64,
    n: f64,
}

impl PoissonLogRate {
    pub fn new(y: &[u64]) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::InvalidArgument("need at least one observation".into()));
        }
        Ok(Self {
            sum_y: y.iter().sum::<u64>() as f64,
            n: y.len() as f64,
        })
    }

    /// `n` copies of the observation `value`.
    pub fn replicated(value: u64, n: usize) -> Result<Self> {
        Self::new(&vec![value; n])
    }

    pub fn n_obs(&self) -> usize {
        self.n as usize
    }

    /// Closed-form mode `log(mean(y))`; all-zero data has its mode at −∞.
    pub fn mode(&self) -> Result<f64> {
        if self.sum_y > 0.0 {
            Ok((self.sum_y / self.n).ln())
        } else {
            Err(Error::ModeNotFound("all-zero Poisson data: mode at -inf".into()))
        }
    }

    pub fn first_derivative(&self, u: f64) -> f64 {
        self.sum_y - self.n * u.exp()
    }

    pub fn second_derivative(&self, u: f64) -> f64 {
        -self.n * u.exp()
    }
}

impl DifferentiableTarget for PoissonLogRate {
    fn dim(&self) -> usize {
        1
    }

    fn evaluate(&self, x: &[f64], parts: Parts) -> Result<EvalResult> {
        check_parts_point(1, x)?;
        let u = x[0];
        let e = u.exp();
        let value = self.sum_y * u - self.n * e;
        if !value.is_finite() {
            return Err(Error::Domain(format!("Poisson log-rate {u} overflows")));
        }
        Ok(EvalResult {
            value,
            gradient: (parts >= Parts::Gradient).then(|| vec![self.sum_y - self.n * e]),
            hessian: (parts >= Parts::Hessian).then(|| SymMatrix::from_diagonal(&[-self.n * e])),
            cost: EvalCost::for_parts(parts),
        })
    }
}

impl UnivariateTargetWithThird for PoissonLogRate {
    fn third_derivative(&self, u: f64) -> f64 {
        -self.n * u.exp()
    }
}

/// Gaussian log-density `−½ (β − m)ᵀ P (β − m)`, dropping the normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: Vec<f64>,
    precision: SymMatrix,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, precision: SymMatrix) -> Result<Self> {
        check_len(precision.dim(), mean.len())?;
        cholesky(&precision)?;
        Ok(Self { mean, precision })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            precision: SymMatrix::identity(dim),
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn precision(&self) -> &SymMatrix {
        &self.precision
    }
}

impl DifferentiableTarget for GaussianPrior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn evaluate(&self, x: &[f64], parts: Parts) -> Result<EvalResult> {
        check_parts_point(self.dim(), x)?;
        let d: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let pd = self.precision.mul_vec(&d);
        let value = -0.5 * dot(&d, &pd);
        Ok(EvalResult {
            value,
            gradient: (parts >= Parts::Gradient).then(|| pd.iter().map(|v| -v).collect()),
            hessian: (parts >= Parts::Hessian).then(|| self.precision.neg()),
            cost: EvalCost::for_parts(parts),
        })
    }
}

impl UnivariateTargetWithThird for GaussianPrior {
    fn third_derivative(&self, _x: f64) -> f64 {
        0.0
    }
}

/// Sum of targets sharing one dimension. Counters are summed over parts.
pub struct AdditiveTarget<'a> {
    dim: usize,
    parts: Vec<Box<dyn DifferentiableTarget + 'a>>,
}

impl<'a> AdditiveTarget<'a> {
    pub fn new(parts: Vec<Box<dyn DifferentiableTarget + 'a>>) -> Result<Self> {
        let dim = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("additive target needs at least one part".into()))?
            .dim();
        for p in &parts {
            check_len(dim, p.dim())?;
        }
        Ok(Self { dim, parts })
    }

    fn combine(&self, mut eval: impl FnMut(&dyn DifferentiableTarget) -> Result<EvalResult>) -> Result<EvalResult> {
        let mut acc: Option<EvalResult> = None;
        for p in &self.parts {
            let r = eval(p.as_ref())?;
            acc = Some(match acc {
                None => r,
                Some(mut a) => {
                    a.value += r.value;
                    if let (Some(ga), Some(gr)) = (a.gradient.as_mut(), r.gradient.as_ref()) {
                        for (x, y) in ga.iter_mut().zip(gr) {
                            *x += y;
                        }
                    }
                    if let (Some(ha), Some(hr)) = (a.hessian.as_mut(), r.hessian.as_ref()) {
                        ha.add_assign(hr)?;
                    }
                    a.cost += r.cost;
                    a
                }
            });
        }
        Ok(acc.expect("non-empty by construction"))
    }
}

impl DifferentiableTarget for AdditiveTarget<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, x: &[f64], parts: Parts) -> Result<EvalResult> {
        self.combine(|p| p.evaluate(x, parts))
    }

    fn evaluate_block(&self, x: &[f64], block: &[usize], parts: Parts) -> Result<EvalResult> {
        self.combine(|p| p.evaluate_block(x, block, parts))
    }
}

/// Per-observation base family `f^i(u_1, ..., u_J)` of a linear-projection
/// model.
pub trait ProjectionBase: Send + Sync {
    /// Number of projected arguments `J`.
    fn arity(&self) -> usize;

    fn n_obs(&self) -> usize;

    /// Returns `f^i(u)` and fills the gradient (length `J`) and row-major
    /// Hessian (`J x J`) in `u`.
    fn eval_obs(&self, i: usize, u: &[f64], grad: &mut [f64], hess: &mut [f64]) -> Result<f64>;
}

/// Bernoulli-logit base: `f^i(u) = y_i u − log(1 + e^u)`.
#[derive(Debug, Clone)]
pub struct BernoulliBase {
    y: Vec<f64>,
}

impl BernoulliBase {
    pub fn new(y: &[u8]) -> Result<Self> {
        if y.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("response must be 0 or 1".into()));
        }
        Ok(Self {
            y: y.iter().map(|&v| f64::from(v)).collect(),
        })
    }
}

impl ProjectionBase for BernoulliBase {
    fn arity(&self) -> usize {
        1
    }

    fn n_obs(&self) -> usize {
        self.y.len()
    }

    fn eval_obs(&self, i: usize, u: &[f64], grad: &mut [f64], hess: &mut [f64]) -> Result<f64> {
        let s = logistic(u[0]);
        grad[0] = self.y[i] - s;
        hess[0] = -s * (1.0 - s);
        Ok(self.y[i] * u[0] - log1pexp(u[0]))
    }
}

/// `f^i(u) = −½ ‖u‖²` for every observation.
#[derive(Debug, Clone)]
pub struct IsotropicGaussianBase {
    arity: usize,
    n: usize,
}

impl IsotropicGaussianBase {
    pub fn new(arity: usize, n: usize) -> Self {
        Self { arity, n }
    }
}

impl ProjectionBase for IsotropicGaussianBase {
    fn arity(&self) -> usize {
        self.arity
    }

    fn n_obs(&self) -> usize {
        self.n
    }

    fn eval_obs(&self, _i: usize, u: &[f64], grad: &mut [f64], hess: &mut [f64]) -> Result<f64> {
        let j = self.arity;
        hess.iter_mut().for_each(|h| *h = 0.0);
        for a in 0..j {
            grad[a] = -u[a];
            hess[a * j + a] = -1.0;
        }
        Ok(-0.5 * dot(u, u))
    }
}

/// Strictly concave quadratic base `f^i(u) = −½ uᵀ A_i u + b_iᵀ u`, one
/// symmetric positive definite `A_i` per observation.
#[derive(Debug, Clone)]
pub struct QuadraticBase {
    arity: usize,
    a: Vec<SymMatrix>,
    b: Vec<Vec<f64>>,
}

impl QuadraticBase {
    pub fn new(a: Vec<SymMatrix>, b: Vec<Vec<f64>>) -> Result<Self> {
        check_len(a.len(), b.len())?;
        let arity = a.first().map_or(0, |m| m.dim());
        if arity == 0 {
            return Err(Error::InvalidArgument("quadratic base needs observations".into()));
        }
        for (m, v) in a.iter().zip(&b) {
            check_len(arity, m.dim())?;
            check_len(arity, v.len())?;
            cholesky(m)?;
        }
        Ok(Self { arity, a, b })
    }

    /// Random instance: `A_i = G Gᵀ + 0.5 I` with Gaussian `G`, Gaussian `b_i`.
    pub fn random<R: Rng + ?Sized>(arity: usize, n: usize, rng: &mut R) -> Self {
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let g: Vec<f64> = (0..arity * arity).map(|_| rng.sample(StandardNormal)).collect();
            let mut m = SymMatrix::zeros(arity);
            for r in 0..arity {
                for c in 0..=r {
                    let s: f64 = (0..arity).map(|k| g[r * arity + k] * g[c * arity + k]).sum();
                    m.set(r, c, s + if r == c { 0.5 } else { 0.0 });
                }
            }
            a.push(m);
            b.push((0..arity).map(|_| rng.sample(StandardNormal)).collect());
        }
        Self { arity, a, b }
    }
}

impl ProjectionBase for QuadraticBase {
    fn arity(&self) -> usize {
        self.arity
    }

    fn n_obs(&self) -> usize {
        self.a.len()
    }

    fn eval_obs(&self, i: usize, u: &[f64], grad: &mut [f64], hess: &mut [f64]) -> Result<f64> {
        let a = &self.a[i];
        let au = a.mul_vec(u);
        for k in 0..self.arity {
            grad[k] = self.b[i][k] - au[k];
        }
        for (h, v) in hess.iter_mut().zip(a.as_slice()) {
            *h = -v;
        }
        Ok(-0.5 * dot(u, &au) + dot(&self.b[i], u))
    }
}

/// `g(β_1, ..., β_J) = Σ_i f^i(⟨x_1^i, β_1⟩, ..., ⟨x_J^i, β_J⟩)` with the
/// blocks `β_j` stacked in order.
pub struct LinearProjectionModel {
    base: Box<dyn ProjectionBase>,
    designs: Vec<DesignMatrix>,
    offsets: Vec<usize>,
    ranks: Vec<usize>,
}

/// Per-observation projected arguments and base Hessians at one point.
#[derive(Debug, Clone)]
pub struct ObservationTerms {
    pub u: Vec<Vec<f64>>,
    pub hessians: Vec<SymMatrix>,
}

impl LinearProjectionModel {
    /// Validates shapes and records each design's numerical column rank.
    pub fn new(base: Box<dyn ProjectionBase>, designs: Vec<DesignMatrix>) -> Result<Self> {
        check_len(base.arity(), designs.len())?;
        let n = base.n_obs();
        let mut offsets = Vec::with_capacity(designs.len() + 1);
        offsets.push(0);
        for d in &designs {
            check_len(n, d.rows())?;
            offsets.push(offsets.last().unwrap() + d.cols());
        }
        let ranks = designs.iter().map(DesignMatrix::column_rank).collect();
        Ok(Self {
            base,
            designs,
            offsets,
            ranks,
        })
    }

    pub fn designs(&self) -> &[DesignMatrix] {
        &self.designs
    }

    pub fn n_groups(&self) -> usize {
        self.designs.len()
    }

    pub fn n_obs(&self) -> usize {
        self.base.n_obs()
    }

    pub fn block_range(&self, j: usize) -> std::ops::Range<usize> {
        self.offsets[j]..self.offsets[j + 1]
    }

    pub fn column_ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn full_rank_flags(&self) -> Vec<bool> {
        self.ranks.iter().zip(&self.designs).map(|(r, d)| *r == d.cols()).collect()
    }

    fn project(&self, i: usize, beta: &[f64], u: &mut [f64]) {
        for (j, d) in self.designs.iter().enumerate() {
            u[j] = dot(d.row(i), &beta[self.block_range(j)]);
        }
    }

    /// Projected arguments `u^i` and base Hessians `H_i` for every
    /// observation.
    pub fn observation_terms(&self, beta: &[f64]) -> Result<ObservationTerms> {
        check_parts_point(self.dim(), beta)?;
        let j = self.base.arity();
        let mut u_all = Vec::with_capacity(self.n_obs());
        let mut h_all = Vec::with_capacity(self.n_obs());
        let mut g = vec![0.0; j];
        let mut h = vec![0.0; j * j];
        for i in 0..self.n_obs() {
            let mut u = vec![0.0; j];
            self.project(i, beta, &mut u);
            self.base.eval_obs(i, &u, &mut g, &mut h)?;
            u_all.push(u);
            h_all.push(SymMatrix::from_row_major(j, &h)?);
        }
        Ok(ObservationTerms { u: u_all, hessians: h_all })
    }
}

impl DifferentiableTarget for LinearProjectionModel {
    fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn evaluate(&self, beta: &[f64], parts: Parts) -> Result<EvalResult> {
        check_parts_point(self.dim(), beta)?;
        let jn = self.base.arity();
        let dim = self.dim();
        let mut u = vec![0.0; jn];
        let mut fg = vec![0.0; jn];
        let mut fh = vec![0.0; jn * jn];
        let mut value = 0.0;
        let mut grad = vec![0.0; dim];
        let mut hess = SymMatrix::zeros(dim);
        for i in 0..self.n_obs() {
            self.project(i, beta, &mut u);
            value += self.base.eval_obs(i, &u, &mut fg, &mut fh)?;
            if parts == Parts::Value {
                continue;
            }
            for j in 0..jn {
                let xj = self.designs[j].row(i);
                let off = self.offsets[j];
                for (a, xa) in xj.iter().enumerate() {
                    grad[off + a] += fg[j] * xa;
                }
            }
            if parts < Parts::Hessian {
                continue;
            }
            // H_jj' += f_{u_j u_j'} x_j^i ⊗ x_j'^i, lower triangle only
            for j in 0..jn {
                let xj = self.designs[j].row(i);
                let oj = self.offsets[j];
                for jp in 0..=j {
                    let w = fh[j * jn + jp];
                    if w == 0.0 {
                        continue;
                    }
                    let xjp = self.designs[jp].row(i);
                    let ojp = self.offsets[jp];
                    for (a, xa) in xj.iter().enumerate() {
                        let wa = w * xa;
                        let lim = if j == jp { a + 1 } else { xjp.len() };
                        for (b, xb) in xjp[..lim].iter().enumerate() {
                            hess.add_to(oj + a, ojp + b, wa * xb);
                        }
                    }
                }
            }
        }
        if !value.is_finite() {
            return Err(Error::Domain("linear-projection log-density is not finite".into()));
        }
        Ok(EvalResult {
            value,
            gradient: (parts >= Parts::Gradient).then_some(grad),
            hessian: (parts >= Parts::Hessian).then_some(hess),
            cost: EvalCost::for_parts(parts),
        })
    }
}

/// Outcome of probing the Hessian of a linear-projection model for
/// negative definiteness.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum WitnessReport {
    /// Every design has full column rank and `−H` factored.
    Certificate {
        min_pivot: f64,
        /// Largest `pᵀHp / ‖p‖²` over random trial directions; negative.
        max_trial_quad: f64,
    },
    /// Some design is rank-deficient: `p` is assembled from null-space
    /// vectors of the deficient designs (zero on full-rank blocks), so every
    /// `q_i` vanishes and `pᵀHp = 0` up to roundoff.
    Degenerate {
        p: Vec<f64>,
        quad: f64,
        hessian_norm: f64,
        p_norm_sq: f64,
    },
    /// All designs full rank but the Cholesky factorization failed, which
    /// means a base Hessian was not negative definite.
    Inconclusive { pivot: usize },
}

impl WitnessReport {
    pub fn is_certificate(&self) -> bool {
        matches!(self, WitnessReport::Certificate { .. })
    }

    /// `|pᵀHp| / (‖H‖ ‖p‖²)` for degenerate witnesses.
    pub fn relative_quad(&self) -> Option<f64> {
        match self {
            WitnessReport::Degenerate {
                quad,
                hessian_norm,
                p_norm_sq,
                ..
            } => Some(quad.abs() / (hessian_norm * p_norm_sq).max(f64::MIN_POSITIVE)),
            _ => None,
        }
    }
}

/// Checks negative definiteness of the model Hessian at `beta`.
///
/// With all designs full rank this factors `−H` and probes `trials` random
/// directions. Otherwise it returns the null-space witness.
pub fn negative_definiteness_witness<R: Rng + ?Sized>(
    model: &LinearProjectionModel,
    beta: &[f64],
    trials: usize,
    rng: &mut R,
) -> Result<WitnessReport> {
    let eval = model.evaluate(beta, Parts::Hessian)?;
    let h = eval.hessian();
    let flags = model.full_rank_flags();
    if flags.iter().all(|&f| f) {
        return Ok(match cholesky(&h.neg()) {
            Ok(f) => {
                let min_pivot = (0..f.dim()).map(|i| f.l(i, i) * f.l(i, i)).fold(f64::INFINITY, f64::min);
                let mut max_trial_quad = f64::NEG_INFINITY;
                for _ in 0..trials {
                    let p: Vec<f64> = (0..h.dim()).map(|_| rng.sample(StandardNormal)).collect();
                    max_trial_quad = max_trial_quad.max(h.quad_form(&p) / dot(&p, &p));
                }
                WitnessReport::Certificate {
                    min_pivot,
                    max_trial_quad,
                }
            }
            Err(Error::NotPositiveDefinite { pivot }) => WitnessReport::Inconclusive { pivot },
            Err(e) => return Err(e),
        });
    }
    let mut p = vec![0.0; model.dim()];
    for (j, d) in model.designs().iter().enumerate() {
        if flags[j] {
            continue;
        }
        let basis = d.null_space_basis();
        let range = model.block_range(j);
        // random combination of the null-space basis
        for v in &basis {
            let c: f64 = rng.sample(StandardNormal);
            for (pk, vk) in p[range.clone()].iter_mut().zip(v) {
                *pk += c * vk;
            }
        }
    }
    let p_norm_sq = dot(&p, &p);
    if p_norm_sq == 0.0 {
        return Err(Error::InvalidArgument("rank-deficient design with empty null space".into()));
    }
    Ok(WitnessReport::Degenerate {
        quad: h.quad_form(&p),
        hessian_norm: h.frobenius_norm(),
        p_norm_sq,
        p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_logistic(n: usize, k: usize, seed: u64) -> LogisticTarget {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DesignMatrix::random_normal(n, k, &mut rng);
        let y = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        LogisticTarget::new(x, y).unwrap()
    }

    #[test]
    fn logistic_at_zero() {
        let t = random_logistic(30, 3, 1);
        let r = t.evaluate(&[0.0; 3], Parts::Gradient).unwrap();
        assert_abs_diff_eq!(r.value, -30.0 * 2f64.ln(), epsilon = 1e-12);
        let y = t.response();
        for k in 0..3 {
            let expected: f64 = (0..30).map(|i| t.design().get(i, k) * (f64::from(y[i]) - 0.5)).sum();
            assert_abs_diff_eq!(r.gradient()[k], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn logistic_single_observation() {
        let t = LogisticTarget::new(DesignMatrix::from_rows(&[vec![1.0]]).unwrap(), vec![1]).unwrap();
        let r = t.evaluate(&[0.0], Parts::Hessian).unwrap();
        assert_eq!(r.gradient(), &[0.5]);
        assert_eq!(r.hessian().get(0, 0), -0.25);
        assert_eq!(r.cost, EvalCost { n_value: 1, n_gradient: 1, n_hessian: 1 });
    }

    #[test]
    fn logistic_extreme_linear_predictor_is_finite() {
        let t = LogisticTarget::new(DesignMatrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(), vec![0, 1]).unwrap();
        let r = t.evaluate(&[800.0], Parts::Hessian).unwrap();
        assert!(r.value.is_finite());
        assert_abs_diff_eq!(r.value, -800.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.gradient()[0], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn logistic_rejects_bad_inputs() {
        let x = DesignMatrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(LogisticTarget::new(x.clone(), vec![2]).is_err());
        assert!(LogisticTarget::new(x.clone(), vec![0, 1]).is_err());
        let t = LogisticTarget::new(x, vec![1]).unwrap();
        assert!(matches!(
            t.evaluate(&[0.0, 1.0], Parts::Value),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn logistic_block_matches_full() {
        let t = random_logistic(40, 6, 3);
        let beta = [0.1, -0.2, 0.3, 0.0, 0.5, -0.4];
        let full = t.evaluate(&beta, Parts::Hessian).unwrap();
        let block = [4, 1, 2];
        let b = t.evaluate_block(&beta, &block, Parts::Hessian).unwrap();
        assert_abs_diff_eq!(b.value, full.value, epsilon = 1e-12);
        for (a, &i) in block.iter().enumerate() {
            assert_abs_diff_eq!(b.gradient()[a], full.gradient()[i], epsilon = 1e-12);
            for (c, &j) in block.iter().enumerate() {
                assert_abs_diff_eq!(b.hessian().get(a, c), full.hessian().get(i, j), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn poisson_closed_forms() {
        let t = PoissonLogRate::new(&[2]).unwrap();
        let mode = t.mode().unwrap();
        assert_abs_diff_eq!(mode, 2f64.ln(), epsilon = 1e-15);
        assert!((mode - 0.69).abs() < 0.005);
        let r = t.evaluate(&[mode], Parts::Hessian).unwrap();
        assert_abs_diff_eq!(r.gradient()[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.hessian().get(0, 0), -2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(t.third_derivative(mode), -2.0, epsilon = 1e-14);

        let ones = PoissonLogRate::replicated(1, 7).unwrap();
        assert_eq!(ones.mode().unwrap(), 0.0);
        assert_eq!(ones.second_derivative(0.0), -7.0);
    }

    #[test]
    fn poisson_all_zero_has_no_mode_but_evaluates() {
        let t = PoissonLogRate::new(&[0, 0, 0]).unwrap();
        assert!(matches!(t.mode(), Err(Error::ModeNotFound(_))));
        assert!(t.value(&[0.0]).unwrap().is_finite());
        assert!(PoissonLogRate::new(&[]).is_err());
    }

    #[test]
    fn gaussian_prior_values() {
        let p = GaussianPrior::standard(3);
        let r = p.evaluate(&[0.0; 3], Parts::Gradient).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.gradient(), &[0.0; 3]);

        let p = GaussianPrior::new(vec![2.0], SymMatrix::from_diagonal(&[4.0])).unwrap();
        let r = p.evaluate(&[3.0], Parts::Hessian).unwrap();
        assert_eq!(r.value, -2.0);
        assert_eq!(r.gradient(), &[-4.0]);
        assert_eq!(r.hessian().get(0, 0), -4.0);

        assert!(matches!(
            GaussianPrior::new(vec![0.0, 0.0], SymMatrix::from_diagonal(&[1.0, -1.0])),
            Err(Error::NotPositiveDefinite { pivot: 1 })
        ));
    }

    #[test]
    fn additive_sums_and_counts() {
        let p1 = SymMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let p2 = SymMatrix::from_rows(&[vec![1.0, -0.3], vec![-0.3, 3.0]]).unwrap();
        let a = GaussianPrior::new(vec![0.0, 1.0], p1.clone()).unwrap();
        let b = GaussianPrior::new(vec![1.0, 0.0], p2.clone()).unwrap();
        let sum = AdditiveTarget::new(vec![Box::new(&a), Box::new(&b)]).unwrap();
        let r = sum.evaluate(&[0.3, 0.7], Parts::Hessian).unwrap();
        assert_eq!(r.hessian(), &p1.add(&p2).unwrap().neg());
        assert_eq!(r.cost.n_hessian, 2);

        let single = AdditiveTarget::new(vec![Box::new(&a)]).unwrap();
        assert_eq!(
            single.evaluate(&[0.3, 0.7], Parts::Hessian).unwrap(),
            a.evaluate(&[0.3, 0.7], Parts::Hessian).unwrap()
        );

        let wrong = GaussianPrior::standard(3);
        assert!(AdditiveTarget::new(vec![Box::new(&a), Box::new(&wrong)]).is_err());
        assert!(AdditiveTarget::new(vec![]).is_err());
    }

    #[test]
    fn identity_projection_is_standard_gaussian() {
        let m = LinearProjectionModel::new(Box::new(IsotropicGaussianBase::new(1, 4)), vec![DesignMatrix::identity(4)]).unwrap();
        let r = m.evaluate(&[0.5, -1.0, 2.0, 0.0], Parts::Hessian).unwrap();
        assert_eq!(r.hessian(), &SymMatrix::identity(4).neg());
        assert_abs_diff_eq!(r.value, -0.5 * (0.25 + 1.0 + 4.0), epsilon = 1e-15);
    }

    #[test]
    fn projection_rejects_shape_errors() {
        let base = Box::new(IsotropicGaussianBase::new(2, 3));
        assert!(LinearProjectionModel::new(base, vec![DesignMatrix::identity(3)]).is_err());
        let base = Box::new(IsotropicGaussianBase::new(1, 3));
        assert!(LinearProjectionModel::new(base, vec![DesignMatrix::identity(4)]).is_err());
    }

    #[test]
    fn rank_and_null_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DesignMatrix::random_normal(20, 4, &mut rng);
        assert_eq!(x.column_rank(), 4);
        assert!(x.null_space_basis().is_empty());

        let dup: Vec<Vec<f64>> = (0..20).map(|i| vec![x.get(i, 0), x.get(i, 0), x.get(i, 2)]).collect();
        let d = DesignMatrix::from_rows(&dup).unwrap();
        assert_eq!(d.column_rank(), 2);
        let ns = d.null_space_basis();
        assert_eq!(ns.len(), 1);
        let v = &ns[0];
        assert_abs_diff_eq!(v[0], -v[1], epsilon = 1e-10);
        assert_abs_diff_eq!(v[2], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn witness_full_rank_certificate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DesignMatrix::random_normal(20, 4, &mut rng);
        let y: Vec<u8> = (0..20).map(|_| rng.random_range(0..2u8)).collect();
        let m = LinearProjectionModel::new(Box::new(BernoulliBase::new(&y).unwrap()), vec![x]).unwrap();
        let rep = negative_definiteness_witness(&m, &[0.1, 0.2, -0.3, 0.0], 20, &mut rng).unwrap();
        match rep {
            WitnessReport::Certificate { max_trial_quad, .. } => assert!(max_trial_quad < 0.0),
            other => panic!("expected certificate, got {other:?}"),
        }
    }

    #[test]
    fn witness_duplicated_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = DesignMatrix::random_normal(20, 3, &mut rng);
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![x.get(i, 0), x.get(i, 0), x.get(i, 1), x.get(i, 2)]).collect();
        let d = DesignMatrix::from_rows(&rows).unwrap();
        let y: Vec<u8> = (0..20).map(|_| rng.random_range(0..2u8)).collect();
        let m = LinearProjectionModel::new(Box::new(BernoulliBase::new(&y).unwrap()), vec![d]).unwrap();
        let rep = negative_definiteness_witness(&m, &[0.1, 0.2, -0.3, 0.0], 0, &mut rng).unwrap();
        let WitnessReport::Degenerate { p, .. } = &rep else {
            panic!("expected witness, got {rep:?}");
        };
        // null direction is (1, -1, 0, 0) up to scale
        assert_abs_diff_eq!(p[0], -p[1], epsilon = 1e-9);
        assert_abs_diff_eq!(p[2], 0.0, epsilon = 1e-9);
        assert!(rep.relative_quad().unwrap() <= 1e-8);
    }

    #[test]
    fn one_full_rank_block_does_not_certify() {
        // J=2 with X1 full rank and X2 rank-deficient: p = (0, p2) with
        // X2 p2 = 0 leaves every q_i at zero, so pᵀHp = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 12;
        let x1 = DesignMatrix::random_normal(n, 2, &mut rng);
        let c = DesignMatrix::random_normal(n, 1, &mut rng);
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![c.get(i, 0), 2.0 * c.get(i, 0)]).collect();
        let x2 = DesignMatrix::from_rows(&rows).unwrap();
        let base = QuadraticBase::random(2, n, &mut rng);
        let m = LinearProjectionModel::new(Box::new(base), vec![x1, x2]).unwrap();
        assert_eq!(m.full_rank_flags(), vec![true, false]);
        let beta = [0.3, -0.1, 0.2, 0.4];
        let rep = negative_definiteness_witness(&m, &beta, 0, &mut rng).unwrap();
        let WitnessReport::Degenerate { p, .. } = &rep else {
            panic!("expected witness, got {rep:?}");
        };
        assert_eq!(&p[..2], &[0.0, 0.0]);
        assert!(rep.relative_quad().unwrap() <= 1e-8);
        let h = m.evaluate(&beta, Parts::Hessian).unwrap().hessian().clone();
        assert!(cholesky(&h.neg()).is_err());
    }
}
