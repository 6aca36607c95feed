//! Chain traces, effective sample size, FEE accounting and the mixing
//! index.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::model::{DifferentiableTarget, EvalCost, Parts, UnivariateTargetWithThird};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceMeta {
    pub sampler: String,
    pub seed: u64,
    pub config: String,
}

/// Post-burn-in samples with per-step flags and counters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub dim: usize,
    /// Row-major `len() x dim`.
    pub samples: Vec<f64>,
    /// Per recorded step: whether the state moved by acceptance.
    pub accepted: Vec<bool>,
    /// Per recorded step `log r`; empty for samplers without a single MH
    /// test per step.
    pub log_ratios: Vec<f64>,
    /// Target-reported counters, cumulative over the recorded phase.
    pub cumulative_cost: Vec<EvalCost>,
    pub burnin_cost: EvalCost,
    /// Deterministic Newton iterations made during burn-in.
    pub newton_evals: u64,
    /// MH transitions made (burn-in and recorded).
    pub mh_steps: u64,
    /// Sampler-level full (value, gradient, Hessian) evaluations over the MH
    /// phases, with caching.
    pub full_evals: u64,
    /// The same count without caching the current point's evaluation.
    pub uncached_full_evals: u64,
    pub proposals: u64,
    pub acceptances: u64,
    /// Proposals rejected because the target could not be evaluated or was
    /// not log-concave there.
    pub incidents: u64,
    /// Seconds spent in the recorded phase.
    pub wall_time: f64,
    pub meta: TraceMeta,
}

impl ChainTrace {
    pub fn new(dim: usize, meta: TraceMeta) -> Self {
        Self {
            dim,
            samples: Vec::new(),
            accepted: Vec::new(),
            log_ratios: Vec::new(),
            cumulative_cost: Vec::new(),
            burnin_cost: EvalCost::default(),
            newton_evals: 0,
            mh_steps: 0,
            full_evals: 0,
            uncached_full_evals: 0,
            proposals: 0,
            acceptances: 0,
            incidents: 0,
            wall_time: 0.0,
            meta,
        }
    }

    pub(crate) fn push(&mut self, x: &[f64], accepted: bool, log_ratio: Option<f64>, cumulative: EvalCost) {
        debug_assert_eq!(x.len(), self.dim);
        self.samples.extend_from_slice(x);
        self.accepted.push(accepted);
        if let Some(r) = log_ratio {
            self.log_ratios.push(r);
        }
        self.cumulative_cost.push(cumulative);
    }

    pub fn len(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.samples[i * self.dim + d]).collect()
    }

    /// Counters over the recorded phase.
    pub fn recorded_cost(&self) -> EvalCost {
        self.cumulative_cost.last().copied().unwrap_or_default()
    }

    /// Fraction of MH proposals accepted; `None` for samplers without an MH
    /// test.
    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.proposals > 0).then(|| self.acceptances as f64 / self.proposals as f64)
    }

    pub fn column_means(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|d| self.column(d).iter().sum::<f64>() / self.len() as f64)
            .collect()
    }
}

/// Effective sample size of one series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ess {
    pub value: f64,
    /// Set for zero-variance series, for which `value` is 0.
    pub degenerate: bool,
}

/// Shortest series accepted by [`effective_size`].
pub const MIN_ESS_LEN: usize = 10;

/// Effective sample size using Geyer's initial monotone positive-sequence
/// estimator of the integrated autocorrelation time.
///
/// Sums of adjacent autocovariance pairs `Γ_m = γ_2m + γ_2m+1` are taken
/// while positive and forced non-increasing; `τ = (−γ_0 + 2ΣΓ_m)/γ_0`.
/// The result is clamped to `(0, 1.5 n]`.
pub fn effective_size(series: &[f64]) -> Result<Ess> {
    let n = series.len();
    if n < MIN_ESS_LEN {
        return Err(Error::InvalidArgument(format!(
            "effective size needs at least {MIN_ESS_LEN} values, got {n}"
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("series contains non-finite values".into()));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let z: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let autocov = |lag: usize| -> f64 { z[..n - lag].iter().zip(&z[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64 };
    let gamma0 = autocov(0);
    if !(gamma0 > 0.0) {
        return Ok(Ess {
            value: 0.0,
            degenerate: true,
        });
    }
    let mut sum_pairs = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = if m == 0 { gamma0 + autocov(1) } else { autocov(2 * m) + autocov(2 * m + 1) };
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum_pairs += pair;
        prev = pair;
        m += 1;
    }
    let tau = (-gamma0 + 2.0 * sum_pairs) / gamma0;
    let ess = if tau > 0.0 { n as f64 / tau } else { f64::INFINITY };
    Ok(Ess {
        value: ess.min(1.5 * n as f64),
        degenerate: false,
    })
}

/// Per-dimension effective sizes of a trace.
pub fn ess_per_dim(trace: &ChainTrace) -> Result<Vec<Ess>> {
    (0..trace.dim).map(|d| effective_size(&trace.column(d))).collect()
}

/// Wall time of one value-only evaluation of a specific target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationProfile {
    pub seconds_per_value_eval: f64,
    pub n_reps: usize,
    pub batch: usize,
}

/// Median wall time of a value-only evaluation at points jittered around
/// `x_probe`. Each repetition times a batch sized to at least 20 µs so the
/// clock resolution does not dominate.
pub fn calibrate<T: DifferentiableTarget + ?Sized>(target: &T, x_probe: &[f64], n_reps: usize) -> Result<CalibrationProfile> {
    check_len(target.dim(), x_probe.len())?;
    if n_reps < 100 {
        return Err(Error::InvalidArgument(format!("calibration needs n_reps >= 100, got {n_reps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_ca1b);
    let jitter = Normal::new(0.0, 1e-3).expect("valid sd");
    let points: Vec<Vec<f64>> = (0..16)
        .map(|_| x_probe.iter().map(|v| v + jitter.sample(&mut rng)).collect())
        .collect();
    let mut sink = 0.0;
    let mut batch = 1usize;
    loop {
        let t = Instant::now();
        for k in 0..batch {
            sink += target.evaluate(&points[k % points.len()], Parts::Value)?.value;
        }
        if t.elapsed().as_secs_f64() >= 20e-6 || batch >= 1 << 20 {
            break;
        }
        batch *= 2;
    }
    let mut times = Vec::with_capacity(n_reps);
    for r in 0..n_reps {
        let t = Instant::now();
        for k in 0..batch {
            sink += target.evaluate(&points[(r + k) % points.len()], Parts::Value)?.value;
        }
        times.push(t.elapsed().as_secs_f64() / batch as f64);
    }
    std::hint::black_box(sink);
    times.sort_by(f64::total_cmp);
    let median = if n_reps % 2 == 1 {
        times[n_reps / 2]
    } else {
        0.5 * (times[n_reps / 2 - 1] + times[n_reps / 2])
    };
    Ok(CalibrationProfile {
        seconds_per_value_eval: median.max(f64::MIN_POSITIVE),
        n_reps,
        batch,
    })
}

/// Function-evaluation equivalents of a trace's recorded phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeeSummary {
    pub total: f64,
    pub per_sample: f64,
    pub counters: EvalCost,
}

/// `wall_time / seconds_per_value_eval`, overall and per recorded sample.
pub fn fee(trace: &ChainTrace, calib: Option<&CalibrationProfile>) -> Result<FeeSummary> {
    let calib = calib.ok_or(Error::MissingCalibration)?;
    if !(calib.seconds_per_value_eval > 0.0) {
        return Err(Error::MissingCalibration);
    }
    let total = trace.wall_time / calib.seconds_per_value_eval;
    Ok(FeeSummary {
        total,
        per_sample: if trace.is_empty() { 0.0 } else { total / trace.len() as f64 },
        counters: trace.recorded_cost(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub fee_per_nominal: f64,
    /// Mean per-dimension ESS divided by the number of samples.
    pub effective_sampling_rate: f64,
    pub fee_per_effective: f64,
    pub ess_per_dim: Vec<f64>,
}

impl EfficiencyReport {
    pub fn new(fee_per_nominal: f64, ess_per_dim: Vec<f64>, n: usize) -> Self {
        let mean_ess = ess_per_dim.iter().sum::<f64>() / ess_per_dim.len().max(1) as f64;
        let effective_sampling_rate = mean_ess / n as f64;
        Self {
            fee_per_nominal,
            effective_sampling_rate,
            fee_per_effective: fee_per_nominal / effective_sampling_rate,
            ess_per_dim,
        }
    }

    /// Element-wise mean of several reports. `fee_per_effective` is
    /// recomputed from the averaged rows so the identity keeps holding.
    pub fn average(reports: &[EfficiencyReport]) -> Option<Self> {
        let k = reports.len();
        if k == 0 {
            return None;
        }
        let nominal = reports.iter().map(|r| r.fee_per_nominal).sum::<f64>() / k as f64;
        let rate = reports.iter().map(|r| r.effective_sampling_rate).sum::<f64>() / k as f64;
        let dim = reports[0].ess_per_dim.len();
        let ess = (0..dim)
            .map(|d| reports.iter().map(|r| r.ess_per_dim[d]).sum::<f64>() / k as f64)
            .collect();
        Some(Self {
            fee_per_nominal: nominal,
            effective_sampling_rate: rate,
            fee_per_effective: nominal / rate,
            ess_per_dim: ess,
        })
    }
}

pub fn efficiency_report(trace: &ChainTrace, calib: Option<&CalibrationProfile>) -> Result<EfficiencyReport> {
    let f = fee(trace, calib)?;
    let ess = ess_per_dim(trace)?.iter().map(|e| e.value).collect();
    Ok(EfficiencyReport::new(f.per_sample, ess, trace.len()))
}

/// Newton search for the mode of a univariate log-density, to `|f′| < 1e-10`.
pub fn find_mode<T: DifferentiableTarget + ?Sized>(target: &T, start: f64) -> Result<f64> {
    if target.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: target.dim(),
        });
    }
    let mut x = start;
    for _ in 0..200 {
        let r = target
            .evaluate(&[x], Parts::Hessian)
            .map_err(|e| Error::ModeNotFound(format!("evaluation failed at {x}: {e}")))?;
        let g = r.gradient()[0];
        let h = r.hessian().get(0, 0);
        if !(h < 0.0) {
            return Err(Error::ModeNotFound(format!("second derivative {h} is not negative at {x}")));
        }
        let next = x - g / h;
        // a vanishing gradient alone is not enough: an unbounded direction
        // with decaying curvature (e.g. all-zero counts) keeps a unit step
        if g.abs() < 1e-10 && (next - x).abs() < 1e-6 * x.abs().max(1.0) {
            return Ok(x);
        }
        if !next.is_finite() {
            return Err(Error::ModeNotFound("Newton iterate diverged".into()));
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
            // stalled at roundoff; accept when the gradient is small relative to curvature
            if g.abs() <= 1e-10 * h.abs().max(1.0) {
                return Ok(next);
            }
        }
        x = next;
    }
    Err(Error::ModeNotFound(format!("no convergence after 200 Newton iterations (last {x})")))
}

/// `η₀ = |f‴(μ₀)| · (−f″(μ₀))^{−3/2}` at the mode `μ₀`, searched from 0.
pub fn mixing_index<T: UnivariateTargetWithThird + ?Sized>(target: &T) -> Result<f64> {
    mixing_index_from(target, 0.0)
}

pub fn mixing_index_from<T: UnivariateTargetWithThird + ?Sized>(target: &T, start: f64) -> Result<f64> {
    let mode = find_mode(target, start)?;
    let tau = -target.evaluate(&[mode], Parts::Hessian)?.hessian().get(0, 0);
    let kappa = target.third_derivative(mode);
    Ok(kappa.abs() * tau.powf(-1.5))
}
