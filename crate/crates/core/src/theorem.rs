//! Randomized campaigns over linear-projection models: the Hessian is
//! assembled from the block formula and by finite differences, and each
//! instance must land on the certificate/witness side its rank plan
//! predicts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    negative_definiteness_witness, BernoulliBase, DesignMatrix, DifferentiableTarget, LinearProjectionModel, Parts,
    ProjectionBase, QuadraticBase, WitnessReport,
};
use crate::mvn::SymMatrix;

/// Agreement required between block-formula and finite-difference Hessians.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Bound on `|pᵀHp| / (‖H‖ ‖p‖²)` for a degenerate witness.
pub const WITNESS_TOLERANCE: f64 = 1e-8;
/// Relative tolerance of `pᵀHp = Σ q_iᵀ H_i q_i`.
pub const Q_IDENTITY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseFamily {
    /// Bernoulli-logit, one projection.
    Bernoulli,
    /// Strictly concave quadratic with one projection per group, which
    /// exercises the cross blocks.
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RankPlan {
    Full,
    /// `d` columns are linear combinations of the others.
    Deficient(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TheoremInstance {
    pub dims: Vec<usize>,
    pub n_obs: usize,
    pub family: BaseFamily,
    pub rank_plan: Vec<RankPlan>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Certificate,
    Witness,
}

impl TheoremInstance {
    pub fn n_groups(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.dims.len();
        if j == 0 || self.rank_plan.len() != j {
            return Err(Error::InvalidArgument("dims and rank plan must be non-empty and equal length".into()));
        }
        if self.family == BaseFamily::Bernoulli && j != 1 {
            return Err(Error::InvalidArgument("the Bernoulli base has exactly one projection".into()));
        }
        for (&k, plan) in self.dims.iter().zip(&self.rank_plan) {
            if k == 0 {
                return Err(Error::InvalidArgument("group dimension must be positive".into()));
            }
            match *plan {
                RankPlan::Full if self.n_obs < k => {
                    return Err(Error::InvalidArgument(format!(
                        "full rank needs at least {k} observations, have {}",
                        self.n_obs
                    )))
                }
                RankPlan::Deficient(d) if d == 0 || d >= k => {
                    return Err(Error::InvalidArgument(format!("deficiency {d} must lie in 1..{k}")))
                }
                _ => {}
            }
        }
        if self.n_obs == 0 {
            return Err(Error::InvalidArgument("at least one observation is required".into()));
        }
        Ok(())
    }

    /// The theorem's prediction: negative definite exactly when every design
    /// has full column rank. One deficient block suffices for a witness,
    /// since a null-space direction on that block alone has every `q_i = 0`.
    pub fn prediction(&self) -> Prediction {
        if self.rank_plan.iter().all(|p| *p == RankPlan::Full) {
            Prediction::Certificate
        } else {
            Prediction::Witness
        }
    }

    /// Realizes the model and the evaluation point from the instance seed.
    pub fn build(&self) -> Result<(LinearProjectionModel, Vec<f64>)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let designs = self
            .dims
            .iter()
            .zip(&self.rank_plan)
            .map(|(&k, plan)| planned_design(self.n_obs, k, *plan, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let base: Box<dyn ProjectionBase> = match self.family {
            BaseFamily::Bernoulli => {
                let y: Vec<u8> = (0..self.n_obs).map(|_| rng.random_range(0..2u8)).collect();
                Box::new(BernoulliBase::new(&y)?)
            }
            BaseFamily::Quadratic => Box::new(QuadraticBase::random(self.dims.len(), self.n_obs, &mut rng)),
        };
        let model = LinearProjectionModel::new(base, designs)?;
        let beta = (0..model.dim()).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        Ok((model, beta))
    }
}

/// `n x k` Gaussian design; a deficient plan replaces its last `d` columns by
/// random combinations of the first `k − d`.
fn planned_design<R: Rng + ?Sized>(n: usize, k: usize, plan: RankPlan, rng: &mut R) -> Result<DesignMatrix> {
    let free = match plan {
        RankPlan::Full => k,
        RankPlan::Deficient(d) => k - d,
    };
    let base = DesignMatrix::random_normal(n, free, rng);
    let mix: Vec<Vec<f64>> = (free..k).map(|_| (0..free).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let mut data = Vec::with_capacity(n * k);
    for i in 0..n {
        let r = base.row(i);
        data.extend_from_slice(r);
        data.extend(mix.iter().map(|c| c.iter().zip(r).map(|(a, b)| a * b).sum::<f64>()));
    }
    DesignMatrix::new(n, k, data)
}

/// Per-instance campaign record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceOutcome {
    pub instance: TheoremInstance,
    pub predicted: Prediction,
    pub observed: Option<Prediction>,
    pub column_ranks: Vec<usize>,
    /// `‖H_fd − H‖_F / ‖H‖_F`.
    pub fd_rel_err: f64,
    /// Relative residual of the `q_i` identity, worst over the trial
    /// directions.
    pub q_identity_rel_err: f64,
    pub witness: WitnessReport,
    pub passed: bool,
    pub failures: Vec<String>,
    /// Smallest instance found that still fails; only set on failure.
    pub reproducer: Option<TheoremInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignReport {
    pub outcomes: Vec<InstanceOutcome>,
    pub n_passed: usize,
    pub n_failed: usize,
    pub max_fd_rel_err: f64,
    pub max_q_identity_rel_err: f64,
    pub max_witness_rel_quad: f64,
}

impl CampaignReport {
    pub fn passed(&self) -> bool {
        self.n_failed == 0
    }

    /// One JSON record per instance, newline-terminated.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for o in &self.outcomes {
            out.push_str(&serde_json::to_string(o).map_err(|e| Error::InvalidArgument(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }
}

const N_Q_TRIALS: usize = 5;
const N_CERT_TRIALS: usize = 20;

/// Checks a single instance without minimization.
pub fn check_instance(inst: &TheoremInstance) -> Result<InstanceOutcome> {
    let (model, beta) = inst.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(inst.seed ^ 0x9e37_79b9_7f4a_7c15);
    let h = model.evaluate(&beta, Parts::Hessian)?.hessian;
    let h = h.expect("Hessian requested");
    let h_fd = fd_hessian(&model, &beta)?;
    let fd_rel_err = h_fd.add(&h.neg())?.frobenius_norm() / h.frobenius_norm().max(f64::MIN_POSITIVE);

    let terms = model.observation_terms(&beta)?;
    let mut q_identity_rel_err: f64 = 0.0;
    for _ in 0..N_Q_TRIALS {
        let p: Vec<f64> = (0..model.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let lhs = h.quad_form(&p);
        let (mut rhs, mut scale) = (0.0, 0.0);
        for (i, hi) in terms.hessians.iter().enumerate() {
            let q: Vec<f64> = (0..model.n_groups())
                .map(|j| crate::model::dot(model.designs()[j].row(i), &p[model.block_range(j)]))
                .collect();
            rhs += hi.quad_form(&q);
            for a in 0..q.len() {
                for b in 0..q.len() {
                    scale += (q[a] * hi.get(a, b) * q[b]).abs();
                }
            }
        }
        q_identity_rel_err = q_identity_rel_err.max((lhs - rhs).abs() / scale.max(f64::MIN_POSITIVE));
    }

    let witness = negative_definiteness_witness(&model, &beta, N_CERT_TRIALS, &mut rng)?;
    let predicted = inst.prediction();
    let mut failures = Vec::new();
    let observed = match &witness {
        WitnessReport::Certificate { max_trial_quad, .. } => {
            if !(*max_trial_quad < 0.0) {
                failures.push(format!("certificate with non-negative trial quadratic form {max_trial_quad}"));
            }
            Some(Prediction::Certificate)
        }
        WitnessReport::Degenerate { .. } => {
            let rq = witness.relative_quad().unwrap_or(f64::INFINITY);
            if rq > WITNESS_TOLERANCE {
                failures.push(format!("witness |pᵀHp|/(‖H‖‖p‖²) = {rq:e} exceeds {WITNESS_TOLERANCE:e}"));
            }
            Some(Prediction::Witness)
        }
        WitnessReport::Inconclusive { pivot } => {
            failures.push(format!("factorization of −H failed at pivot {pivot} despite full-rank designs"));
            None
        }
    };
    if observed.is_some() && observed != Some(predicted) {
        failures.push(format!("predicted {predicted:?}, observed {observed:?}"));
    }
    if !(fd_rel_err < FD_TOLERANCE) {
        failures.push(format!("finite-difference Hessian disagrees: rel err {fd_rel_err:e}"));
    }
    if !(q_identity_rel_err <= Q_IDENTITY_TOLERANCE) {
        failures.push(format!("q_i identity residual {q_identity_rel_err:e}"));
    }
    Ok(InstanceOutcome {
        instance: inst.clone(),
        predicted,
        observed,
        column_ranks: model.column_ranks().to_vec(),
        fd_rel_err,
        q_identity_rel_err,
        witness,
        passed: failures.is_empty(),
        failures,
        reproducer: None,
    })
}

/// Greedily shrinks a failing instance (fewer observations, smaller
/// blocks) while it keeps failing.
pub fn minimize(inst: &TheoremInstance) -> TheoremInstance {
    let fails = |c: &TheoremInstance| c.validate().is_ok() && check_instance(c).map_or(true, |o| !o.passed);
    let mut best = inst.clone();
    loop {
        let mut candidates = Vec::new();
        if best.n_obs > 1 {
            let mut c = best.clone();
            c.n_obs = (best.n_obs / 2).max(1);
            candidates.push(c);
            let mut c = best.clone();
            c.n_obs -= 1;
            candidates.push(c);
        }
        for j in 0..best.dims.len() {
            if best.dims[j] > 1 {
                let mut c = best.clone();
                c.dims[j] -= 1;
                candidates.push(c);
            }
        }
        match candidates.into_iter().find(|c| fails(c)) {
            Some(c) => best = c,
            None => return best,
        }
    }
}

/// Runs every instance, attaching a minimized reproducer to each failure.
/// Instances are independent and checked in parallel; results keep input
/// order.
pub fn run_campaign(instances: &[TheoremInstance]) -> Result<CampaignReport> {
    for inst in instances {
        inst.validate()?;
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(instances.len().max(1));
    let chunk = instances.len().div_ceil(workers).max(1);
    let results: Vec<Result<InstanceOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = instances
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|inst| {
                            let mut o = check_instance(inst)?;
                            if !o.passed {
                                o.reproducer = Some(minimize(inst));
                            }
                            Ok(o)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("campaign worker panicked")).collect()
    });
    let outcomes = results.into_iter().collect::<Result<Vec<_>>>()?;
    let n_passed = outcomes.iter().filter(|o| o.passed).count();
    Ok(CampaignReport {
        n_failed: outcomes.len() - n_passed,
        n_passed,
        max_fd_rel_err: outcomes.iter().map(|o| o.fd_rel_err).fold(0.0, f64::max),
        max_q_identity_rel_err: outcomes.iter().map(|o| o.q_identity_rel_err).fold(0.0, f64::max),
        max_witness_rel_quad: outcomes.iter().filter_map(|o| o.witness.relative_quad()).fold(0.0, f64::max),
        outcomes,
    })
}

/// `count` random instances: a third Bernoulli with one block, the rest
/// bivariate quadratic; plans split between all-full, all-deficient and
/// (for two blocks) mixed.
pub fn random_instances(count: usize, seed: u64) -> Vec<TheoremInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|idx| {
            let family = if idx % 3 == 0 { BaseFamily::Bernoulli } else { BaseFamily::Quadratic };
            let j = if family == BaseFamily::Bernoulli { 1 } else { 2 };
            let dims: Vec<usize> = (0..j).map(|_| rng.random_range(2..=6)).collect();
            let kind = rng.random_range(0..if j == 1 { 2 } else { 3 });
            let rank_plan = dims
                .iter()
                .enumerate()
                .map(|(b, &k)| {
                    let deficient = match kind {
                        0 => false,
                        1 => true,
                        _ => b == 0,
                    };
                    if deficient {
                        RankPlan::Deficient(rng.random_range(1..k))
                    } else {
                        RankPlan::Full
                    }
                })
                .collect();
            let kmax = *dims.iter().max().unwrap();
            TheoremInstance {
                n_obs: rng.random_range(kmax..=kmax + 30),
                dims,
                family,
                rank_plan,
                seed: rng.random(),
            }
        })
        .collect()
}

/// Central second differences of the value with a common step.
fn fd_hessian<T: DifferentiableTarget + ?Sized>(t: &T, x: &[f64]) -> Result<SymMatrix> {
    let d = x.len();
    let h = 1e-3;
    let mut out = SymMatrix::zeros(d);
    let mut w = x.to_vec();
    let f = |w: &mut Vec<f64>, a: usize, sa: f64, b: usize, sb: f64| -> Result<f64> {
        w[a] += sa;
        w[b] += sb;
        let v = t.value(w);
        w[a] = x[a];
        w[b] = x[b];
        v
    };
    for a in 0..d {
        for b in 0..=a {
            let v = f(&mut w, a, h, b, h)? - f(&mut w, a, h, b, -h)? - f(&mut w, a, -h, b, h)? + f(&mut w, a, -h, b, -h)?;
            out.set(a, b, v / (4.0 * h * h));
        }
    }
    Ok(out)
}
