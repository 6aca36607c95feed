//! Univariate slice sampling with stepping out and shrinkage, and the
//! coordinate-wise Gibbs baseline built on it.

use std::time::Instant;

use rand::Rng;
use rand_distr::Exp1;

use crate::diagnostics::{ChainTrace, TraceMeta};
use crate::error::{check_len, Error, Result};
use crate::model::{DifferentiableTarget, EvalCost, Parts};

/// Upper bound on shrinkage iterations before giving up.
pub const MAX_SHRINKS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceConfig {
    /// Initial bracket width `w`.
    pub width: f64,
    /// Maximum number of stepping-out steps `m`.
    pub max_stepout: usize,
    pub seed: u64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            width: 1.0,
            max_stepout: 10,
            seed: 0,
        }
    }
}

impl SliceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::InvalidArgument(format!("slice width must be finite and positive, got {}", self.width)));
        }
        if self.max_stepout < 1 {
            return Err(Error::InvalidArgument("max_stepout must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceUpdate {
    pub x: f64,
    /// `logf(x)` at the new point.
    pub log_density: f64,
    pub n_evals: u64,
}

/// One slice update from `x` whose log-density `fx` is already known.
pub fn slice_step_cached<F, R>(mut logf: F, x: f64, fx: f64, cfg: &SliceConfig, rng: &mut R) -> Result<SliceUpdate>
where
    F: FnMut(f64) -> Result<f64>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if !fx.is_finite() {
        return Err(Error::SliceFailure(format!("log-density at the current point is {fx}")));
    }
    let mut n_evals = 0u64;
    let mut eval = |t: f64| -> Result<f64> {
        n_evals += 1;
        match logf(t) {
            Ok(v) => Ok(v),
            // outside the domain counts as outside the slice
            Err(Error::Domain(_)) => Ok(f64::NEG_INFINITY),
            Err(e) => Err(e),
        }
    };
    let e: f64 = rng.sample(Exp1);
    let level = fx - e;

    let w = cfg.width;
    let mut left = x - w * rng.random::<f64>();
    let mut right = left + w;
    let mut j = (cfg.max_stepout as f64 * rng.random::<f64>()).floor() as usize;
    let mut k = cfg.max_stepout - 1 - j;
    while j > 0 && level < eval(left)? {
        left -= w;
        j -= 1;
    }
    while k > 0 && level < eval(right)? {
        right += w;
        k -= 1;
    }

    for _ in 0..MAX_SHRINKS {
        let x1 = left + rng.random::<f64>() * (right - left);
        let f1 = eval(x1)?;
        if level < f1 {
            return Ok(SliceUpdate {
                x: x1,
                log_density: f1,
                n_evals,
            });
        }
        if x1 == x {
            // bracket collapsed onto x, which is always in the slice
            return Ok(SliceUpdate {
                x,
                log_density: fx,
                n_evals,
            });
        }
        if x1 < x {
            left = x1;
        } else {
            right = x1;
        }
    }
    Err(Error::SliceFailure(format!(
        "no point found in the slice after {} stepouts and {MAX_SHRINKS} shrinks",
        cfg.max_stepout
    )))
}

/// One slice update, evaluating `logf(x)` first. Returns the new point and
/// the number of `logf` calls.
pub fn slice_step_1d<F, R>(mut logf: F, x: f64, cfg: &SliceConfig, rng: &mut R) -> Result<(f64, u64)>
where
    F: FnMut(f64) -> Result<f64>,
    R: Rng + ?Sized,
{
    let fx = logf(x)?;
    let u = slice_step_cached(logf, x, fx, cfg, rng)?;
    Ok((u.x, u.n_evals + 1))
}

/// One coordinate-wise sweep over all coordinates of `x`, value-only.
/// `fx` carries the current log-density in and out. Returns the
/// target-reported counters.
pub fn slice_sweep<T, R>(target: &T, x: &mut [f64], fx: &mut f64, cfg: &SliceConfig, rng: &mut R) -> Result<EvalCost>
where
    T: DifferentiableTarget + ?Sized,
    R: Rng + ?Sized,
{
    let mut cost = EvalCost::default();
    let mut work = x.to_vec();
    for d in 0..x.len() {
        let update = slice_step_cached(
            |t| {
                work[d] = t;
                let r = target.evaluate(&work, Parts::Value)?;
                cost += r.cost;
                Ok(r.value)
            },
            x[d],
            *fx,
            cfg,
            rng,
        )?;
        x[d] = update.x;
        work.copy_from_slice(x);
        *fx = update.log_density;
    }
    Ok(cost)
}

/// Gibbs chain of univariate slice updates, one sweep per recorded step.
/// Only value evaluations are requested from the target.
pub fn slice_gibbs_chain<T, R>(
    target: &T,
    x0: &[f64],
    n_burnin: usize,
    n_samples: usize,
    cfg: &SliceConfig,
    rng: &mut R,
) -> Result<ChainTrace>
where
    T: DifferentiableTarget + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    check_len(target.dim(), x0.len())?;
    let mut trace = ChainTrace::new(
        target.dim(),
        TraceMeta {
            sampler: "slice".into(),
            seed: cfg.seed,
            config: format!(
                "width={} max_stepout={} n_burnin={n_burnin} n_samples={n_samples}",
                cfg.width, cfg.max_stepout
            ),
        },
    );
    let mut x = x0.to_vec();
    let first = target.evaluate(&x, Parts::Value)?;
    let mut fx = first.value;
    trace.burnin_cost += first.cost;
    for _ in 0..n_burnin {
        trace.burnin_cost += slice_sweep(target, &mut x, &mut fx, cfg, rng)?;
    }
    let start = Instant::now();
    let mut cost = EvalCost::default();
    for _ in 0..n_samples {
        cost += slice_sweep(target, &mut x, &mut fx, cfg, rng)?;
        trace.push(&x, true, None, cost);
    }
    trace.wall_time = start.elapsed().as_secs_f64();
    Ok(trace)
}
