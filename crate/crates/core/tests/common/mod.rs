//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's own numerical helpers.
#![allow(dead_code)]

use mhmgt::model::{DifferentiableTarget, Parts};

/// Central-difference gradient of the value.
pub fn fd_gradient<T: DifferentiableTarget + ?Sized>(t: &T, x: &[f64], h: f64) -> Vec<f64> {
    let mut w = x.to_vec();
    (0..x.len())
        .map(|i| {
            w[i] = x[i] + h;
            let fp = t.value(&w).unwrap();
            w[i] = x[i] - h;
            let fm = t.value(&w).unwrap();
            w[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Central differences of the analytic gradient, symmetrized. Returned
/// row-major.
pub fn fd_hessian<T: DifferentiableTarget + ?Sized>(t: &T, x: &[f64], h: f64) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d * d];
    let mut w = x.to_vec();
    for j in 0..d {
        w[j] = x[j] + h;
        let gp = t.evaluate(&w, Parts::Gradient).unwrap().gradient.unwrap();
        w[j] = x[j] - h;
        let gm = t.evaluate(&w, Parts::Gradient).unwrap().gradient.unwrap();
        w[j] = x[j];
        for i in 0..d {
            out[i * d + j] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    for i in 0..d {
        for j in 0..i {
            let m = 0.5 * (out[i * d + j] + out[j * d + i]);
            out[i * d + j] = m;
            out[j * d + i] = m;
        }
    }
    out
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖b‖, 1)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(1.0)
}

/// Gradient and Hessian relative errors of a target at `x`.
pub fn derivative_errors<T: DifferentiableTarget + ?Sized>(t: &T, x: &[f64]) -> (f64, f64) {
    let r = t.evaluate(x, Parts::Hessian).unwrap();
    let g = r.gradient.clone().unwrap();
    let h = r.hessian.clone().unwrap();
    let g_fd = fd_gradient(t, x, 1e-5);
    let h_fd = fd_hessian(t, x, 1e-5);
    (rel_err(&g_fd, &g), rel_err(&h_fd, h.as_slice()))
}

/// Density of the Poisson log-rate posterior for one observation `{2}`
/// under a flat prior on `u`: `exp(2u − eᵘ)`, which integrates to `Γ(2) = 1`.
pub fn poisson2_density(u: f64) -> f64 {
    (2.0 * u - u.exp()).exp()
}

/// Closed-form CDF of the same density: `1 − e^{−λ}(1 + λ)`, `λ = eᵘ`.
pub fn poisson2_cdf_closed(u: f64) -> f64 {
    let l = u.exp();
    1.0 - (-l).exp() * (1.0 + l)
}

/// Tabulated CDF by composite Simpson quadrature on `[lo, hi]`.
pub struct QuadratureCdf {
    lo: f64,
    step: f64,
    cdf: Vec<f64>,
}

impl QuadratureCdf {
    pub fn new(density: impl Fn(f64) -> f64, lo: f64, hi: f64, cells: usize) -> Self {
        let step = (hi - lo) / cells as f64;
        let mut cdf = Vec::with_capacity(cells + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for c in 0..cells {
            let a = lo + c as f64 * step;
            acc += step / 6.0 * (density(a) + 4.0 * density(a + 0.5 * step) + density(a + step));
            cdf.push(acc);
        }
        let total = acc;
        for v in &mut cdf {
            *v /= total;
        }
        Self { lo, step, cdf }
    }

    pub fn eval(&self, u: f64) -> f64 {
        let pos = (u - self.lo) / self.step;
        if pos <= 0.0 {
            return 0.0;
        }
        let i = pos.floor() as usize;
        if i + 1 >= self.cdf.len() {
            return 1.0;
        }
        let t = pos - i as f64;
        self.cdf[i] * (1.0 - t) + self.cdf[i + 1] * t
    }
}

/// Two-sided Kolmogorov-Smirnov distance between a sample and a CDF.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// AR(1) series `x_t = ρ x_{t−1} + √(1−ρ²) ε_t`, started from stationarity.
pub fn ar1<R: rand::Rng>(rho: f64, n: usize, rng: &mut R) -> Vec<f64> {
    use rand_distr::StandardNormal;
    let s = (1.0 - rho * rho).sqrt();
    let mut x: f64 = rng.sample(StandardNormal);
    (0..n)
        .map(|_| {
            x = rho * x + s * rng.sample::<f64, _>(StandardNormal);
            x
        })
        .collect()
}

/// Newton recurrence for `f(u) = y·u − eᵘ`, written out directly.
pub fn poisson_newton_iterates(y: f64, u0: f64, steps: usize) -> Vec<f64> {
    let mut u = u0;
    (0..steps)
        .map(|_| {
            // f' = y − eᵘ, f'' = −eᵘ
            u += (y - u.exp()) / u.exp();
            u
        })
        .collect()
}
