mod common;

use mhmgt::diagnostics::effective_size;
use mhmgt::experiments::random_gaussian;
use mhmgt::gibbs::ConditionalTarget;
use mhmgt::mgt::{build_proposal, mgt_step};
use mhmgt::model::{DesignMatrix, DifferentiableTarget, GaussianPrior, LogisticTarget, Parts};
use mhmgt::mvn::{cholesky, MvnDistribution, SymMatrix};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spd(dim: usize, seed: u64) -> SymMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DesignMatrix::random_normal(dim, dim, &mut rng);
    let mut m = SymMatrix::zeros(dim);
    for i in 0..dim {
        for j in 0..=i {
            let s: f64 = (0..dim).map(|k| a.get(i, k) * a.get(j, k)).sum();
            m.set(i, j, s + if i == j { 1.0 } else { 0.0 });
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_reconstructs(dim in 1usize..=20, seed in any::<u64>()) {
        let m = spd(dim, seed);
        let f = cholesky(&m).unwrap();
        let r = f.reconstruct();
        let scale = m.max_abs();
        for i in 0..dim {
            for j in 0..dim {
                prop_assert!((r.get(i, j) - m.get(i, j)).abs() <= 1e-12 * scale * dim as f64);
            }
        }
    }

    #[test]
    fn cholesky_solve_inverts(dim in 1usize..=12, seed in any::<u64>()) {
        let m = spd(dim, seed);
        let b: Vec<f64> = (0..dim).map(|i| (i as f64 + 1.0).sin()).collect();
        let x = cholesky(&m).unwrap().solve(&b);
        let back = m.mul_vec(&x);
        prop_assert!(common::rel_err(&back, &b) < 1e-10);
    }

    #[test]
    fn logpdf_matches_dense_formula(dim in 1usize..=8, seed in any::<u64>()) {
        let p = spd(dim, seed);
        let mean: Vec<f64> = (0..dim).map(|i| 0.3 * i as f64 - 0.5).collect();
        let x: Vec<f64> = (0..dim).map(|i| (seed.wrapping_add(i as u64) % 7) as f64 * 0.25 - 0.7).collect();
        let dist = MvnDistribution::from_precision(mean.clone(), &p).unwrap();
        let pm = DMatrix::from_row_slice(dim, dim, p.as_slice());
        let d: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
        let dv = nalgebra::DVector::from_vec(d);
        let quad = (dv.transpose() * &pm * &dv)[(0, 0)];
        let expected = -0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * pm.determinant().ln() - 0.5 * quad;
        prop_assert!((dist.logpdf(&x) - expected).abs() < 1e-9 * expected.abs().max(1.0));
    }

    #[test]
    fn ess_is_shift_and_scale_invariant(seed in any::<u64>(), shift in -1e3f64..1e3, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::ar1(0.6, 500, &mut rng);
        let y: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
        let a = effective_size(&x).unwrap().value;
        let b = effective_size(&y).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-6 * a);
    }

    #[test]
    fn ess_is_within_bounds(seed in any::<u64>(), rho in -0.9f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::ar1(rho, 300, &mut rng);
        let e = effective_size(&x).unwrap();
        prop_assert!(e.value > 0.0 && e.value <= 450.0);
    }

    #[test]
    fn splice_only_touches_the_block(seed in any::<u64>(), dim in 2usize..10) {
        let t = GaussianPrior::standard(dim);
        let full: Vec<f64> = (0..dim).map(|i| i as f64).collect();
        let block: Vec<usize> = (0..dim).filter(|i| (seed >> i) & 1 == 1).collect();
        prop_assume!(!block.is_empty());
        let c = ConditionalTarget::new(&t, block.clone(), &full).unwrap();
        let b: Vec<f64> = block.iter().map(|&i| -100.0 - i as f64).collect();
        let s = c.splice(&b);
        for i in 0..dim {
            match block.iter().position(|&k| k == i) {
                Some(p) => prop_assert_eq!(s[i], b[p]),
                None => prop_assert_eq!(s[i], full[i]),
            }
        }
        prop_assert_eq!(c.current(), block.iter().map(|&i| full[i]).collect::<Vec<_>>());
    }

    #[test]
    fn gaussian_proposals_are_exact(dim in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_gaussian(dim, &mut rng).unwrap();
        let x: Vec<f64> = (0..dim).map(|i| 3.0 * (i as f64 - 1.5)).collect();
        let q = build_proposal(&t, &x).unwrap();
        prop_assert!(common::rel_err(q.mean(), t.mean()) < 1e-10);
        let diff = q.precision().add(&t.precision().neg()).unwrap();
        prop_assert!(diff.frobenius_norm() <= 1e-10 * t.precision().frobenius_norm());
        let s = mgt_step(&t, &x, None, &mut rng).unwrap();
        prop_assert!(s.record.accepted);
        prop_assert!(s.record.log_ratio.abs() < 1e-8);
    }

    #[test]
    fn logistic_block_evaluation_matches_restriction(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DesignMatrix::random_normal(40, 6, &mut rng);
        let y = (0..40).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
        let t = LogisticTarget::new(x, y).unwrap();
        let beta: Vec<f64> = (0..6).map(|i| 0.2 * i as f64 - 0.5).collect();
        let block = [4usize, 1, 2];
        let full = t.evaluate(&beta, Parts::Hessian).unwrap();
        let part = t.evaluate_block(&beta, &block, Parts::Hessian).unwrap();
        prop_assert!((full.value - part.value).abs() < 1e-12 * full.value.abs().max(1.0));
        for (a, &i) in block.iter().enumerate() {
            prop_assert!((part.gradient()[a] - full.gradient()[i]).abs() < 1e-10);
            for (b, &j) in block.iter().enumerate() {
                prop_assert!((part.hessian().get(a, b) - full.hessian().get(i, j)).abs() < 1e-10);
            }
        }
    }
}
