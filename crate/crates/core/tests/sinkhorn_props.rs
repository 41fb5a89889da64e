use avalign::numerics::{Matrix, RngState};
use avalign::sinkhorn::{marginal_residual, sinkhorn_solve, sinkhorn_solve_observed, SimilarityMatrix, SinkhornConfig};
use proptest::prelude::*;

fn instance(seed: u64, rows: usize, cols: usize) -> SimilarityMatrix {
    SimilarityMatrix(RngState::new(seed).uniform_matrix(rows, cols, -1.0, 1.0))
}

fn eps_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.05), Just(0.1), Just(0.3), Just(1.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn converged_plans_are_feasible(seed in any::<u64>(), rows in 1usize..=64, cols in 1usize..=48, eps in eps_strategy()) {
        let res = sinkhorn_solve(&instance(seed, rows, cols), &SinkhornConfig::with_epsilon(eps)).unwrap();
        prop_assert!(res.plan.matrix().as_slice().iter().all(|&q| q >= 0.0));
        prop_assert!((res.residual - marginal_residual(&res.plan)).abs() < 1e-15);
        if res.converged {
            prop_assert!(res.residual <= 1e-8);
            prop_assert!((res.plan.matrix().sum() - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn residual_never_increases(seed in any::<u64>(), rows in 1usize..=64, cols in 1usize..=48, eps in eps_strategy()) {
        let mut trace = Vec::new();
        let cfg = SinkhornConfig { epsilon: eps, tolerance: 1e-12, max_iters: 300 };
        sinkhorn_solve_observed(&instance(seed, rows, cols), &cfg, |_, r| trace.push(r)).unwrap();
        for w in trace.windows(2) {
            // rounding noise near the floating-point floor is not an increase
            prop_assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn constant_shift_leaves_plan_unchanged(seed in any::<u64>(), rows in 1usize..=16, cols in 1usize..=16, shift in -5.0f64..5.0) {
        let cfg = SinkhornConfig::with_epsilon(0.3);
        let s = instance(seed, rows, cols);
        let shifted = SimilarityMatrix(s.matrix().map(|x| x + shift));
        let a = sinkhorn_solve(&s, &cfg).unwrap();
        let b = sinkhorn_solve(&shifted, &cfg).unwrap();
        prop_assume!(a.converged && b.converged);
        prop_assert!(a.plan.matrix().max_abs_diff(b.plan.matrix()) <= 1e-8);
    }

    #[test]
    fn plan_is_its_log_scalings(seed in any::<u64>(), rows in 1usize..=12, cols in 1usize..=12, eps in eps_strategy()) {
        let s = instance(seed, rows, cols);
        let res = sinkhorn_solve(&s, &SinkhornConfig::with_epsilon(eps)).unwrap();
        prop_assume!(res.converged);
        let rebuilt = Matrix::from_fn(rows, cols, |i, j| (res.log_u[i] + s.matrix()[(i, j)] / eps + res.log_v[j]).exp());
        prop_assert!(rebuilt.max_abs_diff(res.plan.matrix()) <= 1e-10);
    }
}
