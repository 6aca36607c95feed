//! Block Gibbs scheduling of MH-MGT and the hierarchical Bayesian logistic
//! regression sampler.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::Serialize;

use crate::diagnostics::{ChainTrace, TraceMeta};
use crate::error::{check_len, Error, Result};
use crate::mgt::{mgt_step, newton_step, MgtConfig};
use crate::model::{AdditiveTarget, DesignMatrix, DifferentiableTarget, EvalCost, EvalResult, GaussianPrior, LogisticTarget, Parts};
use crate::mvn::{MvnDistribution, SymMatrix};
use crate::slice::{slice_sweep, SliceConfig};

/// Ordered, disjoint index groups covering `0..dim`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    dim: usize,
    blocks: Vec<Vec<usize>>,
}

pub const DEFAULT_BLOCK_SIZE: usize = 5;

impl BlockPartition {
    pub fn new(dim: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; dim];
        for b in &blocks {
            if b.is_empty() {
                return Err(Error::InvalidArgument("empty block in partition".into()));
            }
            for &i in b {
                if i >= dim {
                    return Err(Error::InvalidArgument(format!("index {i} out of range for dimension {dim}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidArgument(format!("index {i} appears in two blocks")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("index {missing} is not covered by any block")));
        }
        Ok(Self { dim, blocks })
    }

    /// Contiguous runs of `size` indices in declaration order; the last block
    /// takes the remainder.
    pub fn contiguous(dim: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("block size must be positive".into()));
        }
        let blocks = (0..dim).step_by(size).map(|s| (s..(s + size).min(dim)).collect()).collect();
        Self::new(dim, blocks)
    }

    pub fn singletons(dim: usize) -> Self {
        Self {
            dim,
            blocks: (0..dim).map(|i| vec![i]).collect(),
        }
    }

    pub fn whole(dim: usize) -> Self {
        Self {
            dim,
            blocks: vec![(0..dim).collect()],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// The parent target as a function of `block` coordinates only, with the
/// remaining coordinates frozen.
pub struct ConditionalTarget<'a, T: ?Sized> {
    parent: &'a T,
    block: Vec<usize>,
    frozen: Vec<f64>,
}

impl<'a, T: DifferentiableTarget + ?Sized> ConditionalTarget<'a, T> {
    pub fn new(parent: &'a T, block: Vec<usize>, current_full: &[f64]) -> Result<Self> {
        check_len(parent.dim(), current_full.len())?;
        if block.is_empty() || block.iter().any(|&i| i >= parent.dim()) {
            return Err(Error::InvalidArgument("invalid conditioning block".into()));
        }
        Ok(Self {
            parent,
            block,
            frozen: current_full.to_vec(),
        })
    }

    /// Current block values.
    pub fn current(&self) -> Vec<f64> {
        self.block.iter().map(|&i| self.frozen[i]).collect()
    }

    /// Full-dimensional point with `b` spliced into the block.
    pub fn splice(&self, b: &[f64]) -> Vec<f64> {
        let mut full = self.frozen.clone();
        for (&i, v) in self.block.iter().zip(b) {
            full[i] = *v;
        }
        full
    }
}

impl<T: DifferentiableTarget + ?Sized> DifferentiableTarget for ConditionalTarget<'_, T> {
    fn dim(&self) -> usize {
        self.block.len()
    }

    fn evaluate(&self, b: &[f64], parts: Parts) -> Result<EvalResult> {
        check_len(self.block.len(), b.len())?;
        self.parent.evaluate_block(&self.splice(b), &self.block, parts)
    }
}

/// Per-sweep outcome of [`block_mgt_sweep`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepRecord {
    pub accepted: Vec<bool>,
    pub log_ratios: Vec<f64>,
    pub cost: EvalCost,
    pub full_evals: u64,
    pub incidents: u64,
}

/// Applies one MH-MGT step to each block conditional in order, updating
/// `x` in place. Each block step evaluates its conditional afresh, since the
/// other blocks may have moved since it was last visited.
pub fn block_mgt_sweep<T, R>(parent: &T, partition: &BlockPartition, x: &mut [f64], rng: &mut R) -> Result<SweepRecord>
where
    T: DifferentiableTarget + ?Sized,
    R: Rng + ?Sized,
{
    check_len(parent.dim(), partition.dim())?;
    check_len(parent.dim(), x.len())?;
    let mut rec = SweepRecord::default();
    for block in partition.blocks() {
        let cond = ConditionalTarget::new(parent, block.clone(), x)?;
        let step = mgt_step(&cond, &cond.current(), None, rng)?;
        for (&i, v) in block.iter().zip(&step.x_new) {
            x[i] = *v;
        }
        rec.accepted.push(step.record.accepted);
        rec.log_ratios.push(step.record.log_ratio);
        rec.cost += step.record.cost;
        rec.full_evals += step.record.full_evals;
        if step.record.incident.is_some() {
            rec.incidents += 1;
        }
    }
    Ok(rec)
}

/// Deterministic Newton step on each block conditional in turn.
pub fn block_newton_sweep<T>(parent: &T, partition: &BlockPartition, x: &mut [f64]) -> Result<EvalCost>
where
    T: DifferentiableTarget + ?Sized,
{
    let mut cost = EvalCost::default();
    for block in partition.blocks() {
        let cond = ConditionalTarget::new(parent, block.clone(), x)?;
        let next = newton_step(&cond, &cond.current())?;
        cost += EvalCost::for_parts(Parts::Hessian);
        for (&i, v) in block.iter().zip(&next) {
            x[i] = *v;
        }
    }
    Ok(cost)
}

/// Block-Gibbs MH-MGT chain: `n_newton` block-Newton sweeps, the rest of
/// burn-in as MH sweeps, then `n_samples` recorded sweeps.
pub fn run_block_chain<T, R>(
    target: &T,
    partition: &BlockPartition,
    x0: &[f64],
    cfg: &MgtConfig,
    rng: &mut R,
) -> Result<ChainTrace>
where
    T: DifferentiableTarget + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    check_len(target.dim(), x0.len())?;
    check_len(target.dim(), partition.dim())?;
    let mut trace = ChainTrace::new(
        target.dim(),
        TraceMeta {
            sampler: "block-mh-mgt".into(),
            seed: cfg.seed,
            config: format!(
                "blocks={} n_newton={} n_burnin={} n_samples={}",
                partition.len(),
                cfg.n_newton,
                cfg.n_burnin,
                cfg.n_samples
            ),
        },
    );
    let mut x = x0.to_vec();
    for _ in 0..cfg.n_newton {
        trace.burnin_cost += block_newton_sweep(target, partition, &mut x)?;
        trace.newton_evals += partition.len() as u64;
    }
    for _ in cfg.n_newton..cfg.n_burnin {
        let r = block_mgt_sweep(target, partition, &mut x, rng)?;
        trace.burnin_cost += r.cost;
        trace.full_evals += r.full_evals;
        trace.mh_steps += r.accepted.len() as u64;
        trace.incidents += r.incidents;
    }
    let start = Instant::now();
    let mut cost = EvalCost::default();
    for _ in 0..cfg.n_samples {
        let r = block_mgt_sweep(target, partition, &mut x, rng)?;
        cost += r.cost;
        trace.full_evals += r.full_evals;
        trace.mh_steps += r.accepted.len() as u64;
        trace.proposals += r.accepted.len() as u64;
        trace.acceptances += r.accepted.iter().filter(|&&a| a).count() as u64;
        trace.incidents += r.incidents;
        let single = (r.log_ratios.len() == 1).then(|| r.log_ratios[0]);
        trace.push(&x, r.accepted.iter().any(|&a| a), single, cost);
    }
    trace.wall_time = start.elapsed().as_secs_f64();
    trace.uncached_full_evals = 2 * trace.mh_steps;
    Ok(trace)
}

/// Hyperparameters of the hierarchical model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HbHyper {
    /// Gamma shape for each coefficient precision `τ_k`.
    pub a: f64,
    /// Gamma rate for each `τ_k`.
    pub b: f64,
    /// Prior precision of every element of `γ`.
    pub lambda: f64,
}

impl Default for HbHyper {
    fn default() -> Self {
        Self {
            a: 0.001,
            b: 0.001,
            lambda: 1e-4,
        }
    }
}

/// One regression group: its design and binary responses.
#[derive(Debug, Clone)]
pub struct HbGroup {
    pub x: DesignMatrix,
    pub y: Vec<u8>,
}

/// `y_i ~ Bern(σ(x_iᵀ β_{j[i]}))`, `β_j ~ N(z_jᵀ Γ, diag(1/τ))` with
/// conjugate Gaussian prior on `Γ` (L x K) and Gamma priors on `τ_k`.
#[derive(Debug, Clone)]
pub struct HbModelSpec {
    groups: Vec<HbGroup>,
    z: DesignMatrix,
    pub hyper: HbHyper,
}

impl HbModelSpec {
    pub fn new(groups: Vec<HbGroup>, z: DesignMatrix, hyper: HbHyper) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidArgument("at least one group is required".into()));
        }
        check_len(groups.len(), z.rows())?;
        let k = groups[0].x.cols();
        for g in &groups {
            check_len(k, g.x.cols())?;
            check_len(g.x.rows(), g.y.len())?;
            if g.y.iter().any(|&v| v > 1) {
                return Err(Error::InvalidArgument("responses must be binary".into()));
            }
        }
        if !(hyper.a > 0.0 && hyper.b > 0.0 && hyper.lambda > 0.0) {
            return Err(Error::InvalidArgument("hyperparameters must be positive".into()));
        }
        Ok(Self { groups, z, hyper })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_coef(&self) -> usize {
        self.groups[0].x.cols()
    }

    pub fn n_upper(&self) -> usize {
        self.z.cols()
    }

    pub fn groups(&self) -> &[HbGroup] {
        &self.groups
    }

    pub fn upper_design(&self) -> &DesignMatrix {
        &self.z
    }
}

/// How the `β_j` conditionals are sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSampler {
    /// Block MH-MGT with contiguous blocks of the given size.
    Mgt { block_size: usize },
    /// Coordinate-wise univariate slice sampling.
    Slice(SliceConfig),
}

impl BetaSampler {
    pub fn name(&self) -> &'static str {
        match self {
            BetaSampler::Mgt { .. } => "mh-mgt",
            BetaSampler::Slice(_) => "slice",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HbConfig {
    pub n_burnin: usize,
    pub n_samples: usize,
    /// Leading burn-in cycles whose MH-MGT `β` updates are replaced by
    /// block-Newton steps. Ignored by the slice sampler.
    pub n_newton: usize,
    pub sampler: BetaSampler,
    pub seed: u64,
}

impl HbConfig {
    pub fn new(n_burnin: usize, n_samples: usize, sampler: BetaSampler, seed: u64) -> Self {
        Self {
            n_burnin,
            n_samples,
            n_newton: n_burnin / 2,
            sampler,
            seed,
        }
    }
}

/// Recorded draws of an HB run. Matrices are row-major per cycle: `beta`
/// holds `J*K` values per cycle (group-major), `gamma` `L*K`, `tau` `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct HbTrace {
    pub n_groups: usize,
    pub n_coef: usize,
    pub n_upper: usize,
    pub n_cycles: usize,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub tau: Vec<f64>,
    pub block_proposals: u64,
    pub block_acceptances: u64,
    pub incidents: u64,
    pub cost: EvalCost,
    /// Seconds spent in recorded-phase `β` updates.
    pub beta_time: f64,
    pub sampler: String,
}

impl HbTrace {
    /// Draws of `β_{jk}` across recorded cycles.
    pub fn beta_series(&self, j: usize, k: usize) -> Vec<f64> {
        let w = self.n_groups * self.n_coef;
        (0..self.n_cycles).map(|c| self.beta[c * w + j * self.n_coef + k]).collect()
    }

    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.block_proposals > 0).then(|| self.block_acceptances as f64 / self.block_proposals as f64)
    }
}

/// Conjugate draw of one column `γ_k` given `β_{·k}` and `τ_k`:
/// precision `τ_k ZᵀZ + λI`, mean from the normal equations.
pub fn sample_gamma_column<R: Rng + ?Sized>(z: &DesignMatrix, beta_k: &[f64], tau_k: f64, lambda: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_len(z.rows(), beta_k.len())?;
    let l = z.cols();
    let mut prec = SymMatrix::zeros(l);
    let mut rhs = vec![0.0; l];
    for j in 0..z.rows() {
        let zj = z.row(j);
        for a in 0..l {
            rhs[a] += tau_k * zj[a] * beta_k[j];
            for b in 0..=a {
                prec.add_to(a, b, tau_k * zj[a] * zj[b]);
            }
        }
    }
    for a in 0..l {
        prec.add_to(a, a, lambda);
    }
    let factor = crate::mvn::cholesky(&prec)?;
    let mean = factor.solve(&rhs);
    let draw = MvnDistribution::new(mean, factor)?.sample(rng);
    if draw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gamma draw".into()));
    }
    Ok(draw)
}

/// Conjugate draw of a precision: `Gamma(a + n/2, rate = b + ½ Σ r²)`.
pub fn sample_precision<R: Rng + ?Sized>(a: f64, b: f64, residuals: &[f64], rng: &mut R) -> Result<f64> {
    let ss: f64 = residuals.iter().map(|r| r * r).sum();
    let shape = a + 0.5 * residuals.len() as f64;
    let rate = b + 0.5 * ss;
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::InvalidArgument(format!("gamma parameters: {e}")))?;
    let t = g.sample(rng);
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::NonFinite(format!("precision draw {t}")));
    }
    Ok(t)
}

/// Systematic-scan Gibbs over (β blocks by group, then γ, then τ).
pub fn hb_gibbs<R: Rng + ?Sized>(spec: &HbModelSpec, cfg: &HbConfig, rng: &mut R) -> Result<HbTrace> {
    let jn = spec.n_groups();
    let kn = spec.n_coef();
    let ln = spec.n_upper();
    let z = spec.upper_design();
    let likelihoods: Vec<LogisticTarget> = spec
        .groups()
        .iter()
        .map(|g| LogisticTarget::new(g.x.clone(), g.y.clone()))
        .collect::<Result<_>>()?;
    let partition = match cfg.sampler {
        BetaSampler::Mgt { block_size } => Some(BlockPartition::contiguous(kn, block_size)?),
        BetaSampler::Slice(s) => {
            s.validate()?;
            None
        }
    };

    let mut beta = vec![vec![0.0; kn]; jn];
    let mut gamma = vec![vec![0.0; kn]; ln]; // row l, column k
    let mut tau = vec![1.0; kn];

    let mut out = HbTrace {
        n_groups: jn,
        n_coef: kn,
        n_upper: ln,
        n_cycles: 0,
        beta: Vec::with_capacity(cfg.n_samples * jn * kn),
        gamma: Vec::with_capacity(cfg.n_samples * ln * kn),
        tau: Vec::with_capacity(cfg.n_samples * kn),
        block_proposals: 0,
        block_acceptances: 0,
        incidents: 0,
        cost: EvalCost::default(),
        beta_time: 0.0,
        sampler: cfg.sampler.name().into(),
    };

    for cycle in 0..cfg.n_burnin + cfg.n_samples {
        let recording = cycle >= cfg.n_burnin;
        let started = Instant::now();
        let precision = SymMatrix::from_diagonal(&tau);
        for j in 0..jn {
            let prior_mean: Vec<f64> = (0..kn).map(|k| (0..ln).map(|l| z.get(j, l) * gamma[l][k]).sum()).collect();
            let prior = GaussianPrior::new(prior_mean, precision.clone())?;
            let post = AdditiveTarget::new(vec![Box::new(&likelihoods[j]), Box::new(&prior)])?;
            match (&cfg.sampler, &partition) {
                (BetaSampler::Mgt { .. }, Some(part)) => {
                    if cycle < cfg.n_newton.min(cfg.n_burnin) {
                        out.cost += block_newton_sweep(&post, part, &mut beta[j])?;
                    } else {
                        let r = block_mgt_sweep(&post, part, &mut beta[j], rng)?;
                        out.cost += r.cost;
                        out.incidents += r.incidents;
                        if recording {
                            out.block_proposals += r.accepted.len() as u64;
                            out.block_acceptances += r.accepted.iter().filter(|&&a| a).count() as u64;
                        }
                    }
                }
                (BetaSampler::Slice(s), _) => {
                    let mut fx = post.value(&beta[j])?;
                    out.cost += slice_sweep(&post, &mut beta[j], &mut fx, s, rng)?;
                }
                _ => unreachable!("partition exists exactly for the MH-MGT sampler"),
            }
            if beta[j].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("beta draw for group {j}")));
            }
        }
        if recording {
            out.beta_time += started.elapsed().as_secs_f64();
        }

        for k in 0..kn {
            let beta_k: Vec<f64> = beta.iter().map(|b| b[k]).collect();
            let col = sample_gamma_column(z, &beta_k, tau[k], spec.hyper.lambda, rng)?;
            for l in 0..ln {
                gamma[l][k] = col[l];
            }
        }
        for k in 0..kn {
            let resid: Vec<f64> = (0..jn)
                .map(|j| beta[j][k] - (0..ln).map(|l| z.get(j, l) * gamma[l][k]).sum::<f64>())
                .collect();
            tau[k] = sample_precision(spec.hyper.a, spec.hyper.b, &resid, rng)?;
        }

        if recording {
            for b in &beta {
                out.beta.extend_from_slice(b);
            }
            for g in &gamma {
                out.gamma.extend_from_slice(g);
            }
            out.tau.extend_from_slice(&tau);
            out.n_cycles += 1;
        }
    }
    Ok(out)
}

/// Parameters of the seeded HB data simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HbSimulation {
    pub n_groups: usize,
    pub n_coef: usize,
    pub n_upper: usize,
    /// Group sizes are drawn log-uniformly in `[min_obs, max_obs]`.
    pub min_obs: usize,
    pub max_obs: usize,
    /// True between-group standard deviation of every coefficient.
    pub sigma: f64,
    /// Standard deviation of the true `γ` entries.
    pub gamma_scale: f64,
}

impl Default for HbSimulation {
    fn default() -> Self {
        Self {
            n_groups: 5,
            n_coef: 10,
            n_upper: 2,
            min_obs: 400,
            max_obs: 400,
            sigma: 0.5,
            gamma_scale: 0.5,
        }
    }
}

/// Ground truth behind a simulated HB data set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HbTruth {
    /// `J x K`, group-major.
    pub beta: Vec<f64>,
    /// `L x K`.
    pub gamma: Vec<f64>,
    pub sigma: f64,
}

/// Simulates designs with an intercept column and standard normal
/// covariates, upper-level designs with an intercept, and Bernoulli
/// responses from the generative model.
pub fn simulate_hb<R: Rng + ?Sized>(sim: &HbSimulation, hyper: HbHyper, rng: &mut R) -> Result<(HbModelSpec, HbTruth)> {
    if sim.n_groups == 0 || sim.n_coef == 0 || sim.n_upper == 0 || sim.min_obs == 0 || sim.min_obs > sim.max_obs {
        return Err(Error::InvalidArgument("invalid simulation sizes".into()));
    }
    let (jn, kn, ln) = (sim.n_groups, sim.n_coef, sim.n_upper);
    let mut zrows = Vec::with_capacity(jn);
    for _ in 0..jn {
        let mut r = vec![1.0];
        r.extend((1..ln).map(|_| rng.sample::<f64, _>(StandardNormal)));
        zrows.push(r);
    }
    let z = DesignMatrix::from_rows(&zrows)?;
    let gamma: Vec<f64> = (0..ln * kn).map(|_| sim.gamma_scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut beta = Vec::with_capacity(jn * kn);
    let mut groups = Vec::with_capacity(jn);
    let (lo, hi) = ((sim.min_obs as f64).ln(), (sim.max_obs as f64).ln());
    for j in 0..jn {
        let bj: Vec<f64> = (0..kn)
            .map(|k| {
                let m: f64 = (0..ln).map(|l| z.get(j, l) * gamma[l * kn + k]).sum();
                m + sim.sigma * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let n = if hi > lo { (lo + (hi - lo) * rng.random::<f64>()).exp().round() as usize } else { sim.min_obs };
        let n = n.clamp(sim.min_obs, sim.max_obs);
        let mut rows = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let mut r = vec![1.0];
            r.extend((1..kn).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let eta: f64 = r.iter().zip(&bj).map(|(a, b)| a * b).sum();
            y.push(u8::from(rng.random::<f64>() < crate::model::logistic(eta)));
            rows.push(r);
        }
        beta.extend_from_slice(&bj);
        groups.push(HbGroup {
            x: DesignMatrix::from_rows(&rows)?,
            y,
        });
    }
    Ok((
        HbModelSpec::new(groups, z, hyper)?,
        HbTruth {
            beta,
            gamma,
            sigma: sim.sigma,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianPrior;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn partition_validation() {
        assert!(BlockPartition::new(3, vec![vec![0, 1], vec![2]]).is_ok());
        assert!(BlockPartition::new(3, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(BlockPartition::new(3, vec![vec![0, 1]]).is_err());
        assert!(BlockPartition::new(3, vec![vec![0, 1, 2], vec![]]).is_err());
        assert!(BlockPartition::new(2, vec![vec![0, 5]]).is_err());
        assert!(BlockPartition::contiguous(4, 0).is_err());
    }

    #[test]
    fn fifty_coefficients_make_ten_blocks() {
        let p = BlockPartition::contiguous(50, DEFAULT_BLOCK_SIZE).unwrap();
        assert_eq!(p.len(), 10);
        assert!(p.blocks().iter().all(|b| b.len() == 5));
        let q = BlockPartition::contiguous(12, 5).unwrap();
        assert_eq!(q.blocks()[2], vec![10, 11]);
    }

    #[test]
    fn whole_block_conditional_is_parent() {
        let prec = SymMatrix::from_rows(&[vec![2.0, 0.4], vec![0.4, 1.0]]).unwrap();
        let t = GaussianPrior::new(vec![0.5, -0.5], prec).unwrap();
        let c = ConditionalTarget::new(&t, vec![0, 1], &[9.0, 9.0]).unwrap();
        let x = [0.3, 0.1];
        assert_eq!(c.evaluate(&x, Parts::Hessian).unwrap(), t.evaluate(&x, Parts::Hessian).unwrap());
    }

    #[test]
    fn gaussian_conditional_hessian_is_principal_submatrix() {
        let prec = SymMatrix::from_rows(&[vec![3.0, 0.5, 0.2], vec![0.5, 2.0, -0.3], vec![0.2, -0.3, 1.5]]).unwrap();
        let t = GaussianPrior::new(vec![0.0; 3], prec.clone()).unwrap();
        let c = ConditionalTarget::new(&t, vec![2, 0], &[0.1, 0.2, 0.3]).unwrap();
        let h = c.evaluate(&[1.0, -1.0], Parts::Hessian).unwrap();
        assert_eq!(h.hessian(), &prec.principal_submatrix(&[2, 0]).neg());
    }

    #[test]
    fn sweep_leaves_other_coordinates() {
        let t = GaussianPrior::standard(6);
        let part = BlockPartition::new(6, vec![vec![1, 3], vec![0, 2, 4, 5]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = vec![0.5; 6];
        let cond = ConditionalTarget::new(&t, part.blocks()[0].clone(), &x).unwrap();
        let step = mgt_step(&cond, &cond.current(), None, &mut rng).unwrap();
        let full = cond.splice(&step.x_new);
        for i in [0, 2, 4, 5] {
            assert_eq!(full[i], x[i]);
        }
        let r = block_mgt_sweep(&t, &part, &mut x, &mut rng).unwrap();
        assert_eq!(r.accepted, vec![true, true]);
    }

    #[test]
    fn precision_sampler_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let resid = [0.3, -0.5, 1.2, 0.1, -0.8];
        let (a, b) = (0.001, 0.001);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_precision(a, b, &resid, &mut rng).unwrap()).sum::<f64>() / n as f64;
        let ss: f64 = resid.iter().map(|r| r * r).sum();
        let expected = (a + 2.5) / (b + 0.5 * ss);
        assert!((mean / expected - 1.0).abs() < 0.01, "{mean} vs {expected}");
    }

    #[test]
    fn gamma_column_with_huge_lambda_is_pinned() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = DesignMatrix::from_rows(&[vec![1.0, 0.5]]).unwrap();
        let g = sample_gamma_column(&z, &[3.0], 1.0, 1e10, &mut rng).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn simulator_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sim = HbSimulation {
            min_obs: 20,
            max_obs: 200,
            ..Default::default()
        };
        let (spec, truth) = simulate_hb(&sim, HbHyper::default(), &mut rng).unwrap();
        assert_eq!(spec.n_groups(), 5);
        assert_eq!(spec.n_coef(), 10);
        assert_eq!(spec.n_upper(), 2);
        assert_eq!(truth.beta.len(), 50);
        for g in spec.groups() {
            assert!((20..=200).contains(&g.x.rows()));
            assert_eq!(g.x.get(0, 0), 1.0);
        }
    }

    #[test]
    fn zero_sample_hb_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sim = HbSimulation {
            n_groups: 2,
            n_coef: 3,
            min_obs: 30,
            max_obs: 30,
            ..Default::default()
        };
        let (spec, _) = simulate_hb(&sim, HbHyper::default(), &mut rng).unwrap();
        let cfg = HbConfig::new(4, 0, BetaSampler::Mgt { block_size: 5 }, 1);
        let tr = hb_gibbs(&spec, &cfg, &mut rng).unwrap();
        assert_eq!(tr.n_cycles, 0);
        assert!(tr.beta.is_empty());
    }

    #[test]
    fn single_group_with_pinned_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sim = HbSimulation {
            n_groups: 1,
            n_coef: 3,
            n_upper: 1,
            min_obs: 200,
            max_obs: 200,
            ..Default::default()
        };
        let hyper = HbHyper {
            lambda: 1e8,
            ..Default::default()
        };
        let (spec, _) = simulate_hb(&sim, hyper, &mut rng).unwrap();
        let cfg = HbConfig::new(20, 50, BetaSampler::Mgt { block_size: 5 }, 2);
        let tr = hb_gibbs(&spec, &cfg, &mut rng).unwrap();
        assert!(tr.gamma.iter().all(|g| g.abs() < 0.01));
        assert_eq!(tr.incidents, 0);
        assert_abs_diff_eq!(tr.beta.len() as f64, 150.0);
    }
}
