//! The MH-MGT kernel.
//!
//! At a point `x` the log-density is expanded to second order and the
//! resulting Gaussian, with mean at the full Newton step `x − H⁻¹g` and
//! precision `−H`, is used as an (asymmetric) Metropolis-Hastings proposal.

use std::time::Instant;

use rand::Rng;

use crate::diagnostics::{ChainTrace, TraceMeta};
use crate::error::{check_len, Error, Result};
use crate::model::{DifferentiableTarget, EvalCost, EvalResult, Parts};
use crate::mvn::{cholesky, MvnDistribution, SymMatrix};

/// Tangent Gaussian `N(x − H⁻¹g, −H⁻¹)` fitted at `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianProposal {
    origin: Vec<f64>,
    dist: MvnDistribution,
}

impl GaussianProposal {
    /// Builds the proposal from an evaluation carrying gradient and Hessian.
    pub fn from_evaluation(x: &[f64], eval: &EvalResult) -> Result<Self> {
        let g = eval
            .gradient
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("proposal needs a gradient".into()))?;
        let h = eval
            .hessian
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("proposal needs a Hessian".into()))?;
        check_len(x.len(), g.len())?;
        let factor = cholesky(&h.neg()).map_err(|e| match e {
            Error::NotPositiveDefinite { pivot } => Error::HessianNotNegativeDefinite { pivot },
            other => other,
        })?;
        // (−H) s = g  ⇒  x − H⁻¹g = x + s
        let step = factor.solve(g);
        let mean: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + s).collect();
        let dist = MvnDistribution::new(mean, factor)?;
        Ok(Self {
            origin: x.to_vec(),
            dist,
        })
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    /// The Newton step from `origin`.
    pub fn mean(&self) -> &[f64] {
        self.dist.mean()
    }

    pub fn precision(&self) -> SymMatrix {
        self.dist.precision()
    }

    pub fn distribution(&self) -> &MvnDistribution {
        &self.dist
    }

    /// `log q(x | origin)`
    pub fn log_q(&self, x: &[f64]) -> f64 {
        self.dist.logpdf(x)
    }
}

/// Evaluates the target at `x` and fits the tangent Gaussian there.
pub fn build_proposal<T: DifferentiableTarget + ?Sized>(target: &T, x: &[f64]) -> Result<GaussianProposal> {
    let eval = target.evaluate(x, Parts::Hessian)?;
    GaussianProposal::from_evaluation(x, &eval)
}

/// Deterministic Newton iteration: the proposal mean.
pub fn newton_step<T: DifferentiableTarget + ?Sized>(target: &T, x: &[f64]) -> Result<Vec<f64>> {
    Ok(build_proposal(target, x)?.mean().to_vec())
}

/// A point together with its log-density and tangent proposal, i.e. the
/// output of steps 1-2 for that point. Reused by the next transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentPoint {
    value: f64,
    proposal: GaussianProposal,
}

impl TangentPoint {
    /// Returns the point and the counters spent evaluating it.
    pub fn evaluate<T: DifferentiableTarget + ?Sized>(target: &T, x: &[f64]) -> Result<(Self, EvalCost)> {
        let eval = target.evaluate(x, Parts::Hessian)?;
        let proposal = GaussianProposal::from_evaluation(x, &eval)?;
        Ok((
            Self {
                value: eval.value,
                proposal,
            },
            eval.cost,
        ))
    }

    pub fn x(&self) -> &[f64] {
        self.proposal.origin()
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn proposal(&self) -> &GaussianProposal {
        &self.proposal
    }
}

/// Why a proposal was rejected without an MH test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Incident {
    /// `−H` at the proposed point did not factor.
    HessianNotNegativeDefinite,
    /// The target could not be evaluated at the proposed point.
    Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgtStepRecord {
    pub proposed: Vec<f64>,
    pub accepted: bool,
    /// `log r`; `−∞` when the proposal was rejected by an incident.
    pub log_ratio: f64,
    pub cost: EvalCost,
    /// Number of full (value, gradient, Hessian) evaluations this step made.
    pub full_evals: u64,
    pub incident: Option<Incident>,
}

#[derive(Debug, Clone)]
pub struct MgtStep {
    pub x_new: Vec<f64>,
    pub record: MgtStepRecord,
    /// Evaluation at `x_new`, valid as the cache for the next step.
    pub cache: TangentPoint,
}

/// One MH-MGT transition from `x_old`.
///
/// With `cached` produced at `x_old`, steps 1-2 are skipped and exactly one
/// full evaluation (at the proposal) is made. Random stream usage per step:
/// `dim` standard normals for the proposal, then one uniform only when
/// `log r < 0` and the proposal was evaluable.
pub fn mgt_step<T, R>(target: &T, x_old: &[f64], cached: Option<TangentPoint>, rng: &mut R) -> Result<MgtStep>
where
    T: DifferentiableTarget + ?Sized,
    R: Rng + ?Sized,
{
    let (old, cost0, evals0) = match cached {
        Some(c) => {
            if c.x() != x_old {
                return Err(Error::InvalidArgument("cached evaluation is not at x_old".into()));
            }
            (c, EvalCost::default(), 0)
        }
        None => {
            let (p, c) = TangentPoint::evaluate(target, x_old)?;
            (p, c, 1)
        }
    };
    let x_prop = old.proposal.distribution().sample(rng);
    let mut step = mh_transition(target, old, x_prop, rng)?;
    step.record.cost += cost0;
    step.record.full_evals += evals0;
    Ok(step)
}

/// Steps 3-7 for an explicitly given proposed point.
pub fn mh_transition<T, R>(target: &T, old: TangentPoint, x_prop: Vec<f64>, rng: &mut R) -> Result<MgtStep>
where
    T: DifferentiableTarget + ?Sized,
    R: Rng + ?Sized,
{
    let log_q_prop = old.proposal.log_q(&x_prop);
    let reject = |old: TangentPoint, x_prop: Vec<f64>, cost: EvalCost, incident| MgtStep {
        x_new: old.x().to_vec(),
        record: MgtStepRecord {
            proposed: x_prop,
            accepted: false,
            log_ratio: f64::NEG_INFINITY,
            cost,
            full_evals: 1,
            incident: Some(incident),
        },
        cache: old,
    };
    let eval = match target.evaluate(&x_prop, Parts::Hessian) {
        Ok(e) => e,
        Err(Error::Domain(_)) => return Ok(reject(old, x_prop, EvalCost::for_parts(Parts::Hessian), Incident::Domain)),
        Err(e) => return Err(e),
    };
    let cost = eval.cost;
    let prop_proposal = match GaussianProposal::from_evaluation(&x_prop, &eval) {
        Ok(p) => p,
        Err(Error::HessianNotNegativeDefinite { .. }) => {
            return Ok(reject(old, x_prop, cost, Incident::HessianNotNegativeDefinite));
        }
        Err(e) => return Err(e),
    };
    let log_q_old = prop_proposal.log_q(old.x());
    let log_ratio = (eval.value - old.value) + (log_q_old - log_q_prop);
    let accepted = if log_ratio >= 0.0 {
        true
    } else {
        let s: f64 = rng.random();
        s < log_ratio.exp()
    };
    let record = MgtStepRecord {
        proposed: x_prop.clone(),
        accepted,
        log_ratio,
        cost,
        full_evals: 1,
        incident: None,
    };
    Ok(if accepted {
        MgtStep {
            x_new: x_prop,
            record,
            cache: TangentPoint {
                value: eval.value,
                proposal: prop_proposal,
            },
        }
    } else {
        MgtStep {
            x_new: old.x().to_vec(),
            record,
            cache: old,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MgtConfig {
    /// Initial deterministic Newton iterations (part of burn-in).
    pub n_newton: usize,
    /// Total burn-in iterations, Newton ones included.
    pub n_burnin: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl MgtConfig {
    /// Uses the first half of burn-in for Newton steps.
    pub fn new(n_burnin: usize, n_samples: usize, seed: u64) -> Self {
        Self {
            n_newton: n_burnin / 2,
            n_burnin,
            n_samples,
            seed,
        }
    }

    pub fn with_newton(mut self, n_newton: usize) -> Self {
        self.n_newton = n_newton;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_newton > self.n_burnin {
            return Err(Error::InvalidArgument(format!(
                "n_newton ({}) exceeds n_burnin ({})",
                self.n_newton, self.n_burnin
            )));
        }
        Ok(())
    }
}

/// Newton phase, MH burn-in, then `n_samples` recorded MH-MGT steps.
///
/// Newton-phase failures abort. Incidents during the MH phases are rejected
/// proposals and are counted in the trace.
pub fn run_chain<T, R>(target: &T, x0: &[f64], cfg: &MgtConfig, rng: &mut R) -> Result<ChainTrace>
where
    T: DifferentiableTarget + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    check_len(target.dim(), x0.len())?;
    let dim = target.dim();
    let mut trace = ChainTrace::new(
        dim,
        TraceMeta {
            sampler: "mh-mgt".into(),
            seed: cfg.seed,
            config: format!(
                "n_newton={} n_burnin={} n_samples={}",
                cfg.n_newton, cfg.n_burnin, cfg.n_samples
            ),
        },
    );
    let mut x = x0.to_vec();
    for _ in 0..cfg.n_newton {
        let (p, c) = TangentPoint::evaluate(target, &x)?;
        trace.burnin_cost += c;
        trace.newton_evals += 1;
        x = p.proposal().mean().to_vec();
    }

    let (mut cache, c) = TangentPoint::evaluate(target, &x)?;
    trace.burnin_cost += c;
    trace.full_evals += 1;
    for _ in cfg.n_newton..cfg.n_burnin {
        let step = mgt_step(target, &x, Some(cache), rng)?;
        trace.burnin_cost += step.record.cost;
        trace.full_evals += step.record.full_evals;
        trace.mh_steps += 1;
        if step.record.incident.is_some() {
            trace.incidents += 1;
        }
        x = step.x_new;
        cache = step.cache;
    }

    let start = Instant::now();
    let mut cost = EvalCost::default();
    for _ in 0..cfg.n_samples {
        let step = mgt_step(target, &x, Some(cache), rng)?;
        cost += step.record.cost;
        trace.full_evals += step.record.full_evals;
        trace.mh_steps += 1;
        trace.proposals += 1;
        if step.record.accepted {
            trace.acceptances += 1;
        }
        if step.record.incident.is_some() {
            trace.incidents += 1;
        }
        x = step.x_new;
        cache = step.cache;
        trace.push(&x, step.record.accepted, Some(step.record.log_ratio), cost);
    }
    trace.wall_time = start.elapsed().as_secs_f64();
    // the step list as written re-evaluates x_old every iteration
    trace.uncached_full_evals = 2 * trace.mh_steps;
    Ok(trace)
}
