use betafact::divergence::Beta;
use betafact::models::{check_constraints, evaluate_model, l21_norm, DataMatrix, ModelKind, ModelSpec, Theta};
use betafact::solvers::{fit, fit_observed, BlockMask, SolverConfig, Termination};
use ndarray::Array2;
use proptest::prelude::*;

mod common;

fn cfg(epsilon: f64, max_iter: usize) -> SolverConfig {
    SolverConfig { epsilon, max_iter, ..SolverConfig::default() }
}

fn frob(a: &Array2<f64>) -> f64 {
    a.mapv(|v| v * v).sum().sqrt()
}

#[test]
fn euclidean_nmf_recovers_noiseless_factorization() {
    let m = common::uniform(10, 3, 0.2, 2.0, 1);
    let a = common::uniform(3, 50, 0.1, 1.0, 2);
    let y = DataMatrix::new(m.dot(&a)).unwrap();
    let theta0 = Theta::new(common::perturb(&m, 0.01, 3), common::perturb(&a, 0.01, 4));
    let spec = ModelSpec::new(ModelKind::Nmf, Beta::EUCLIDEAN, 0.0).unwrap();
    let res = fit(&y, &spec, &theta0, &cfg(1e-14, 20_000)).unwrap();
    let resid = 0.5 * (y.values() - &res.theta.m().dot(res.theta.a())).mapv(|v| v * v).sum();
    let norm = y.values().mapv(|v| v * v).sum();
    assert!(resid <= 1e-6 * norm, "residual {resid} vs {norm}");
    assert_eq!(res.monotonicity_violations, 0);
}

#[test]
fn huge_lambda_drives_variability_to_zero() {
    let (l, k, n, nv) = (8, 3, 30, 2);
    let theta_true = Theta::new(common::uniform(l, k, 0.2, 1.0, 5), common::stochastic(k, n, 6))
        .with_variability(common::uniform(l, nv, 0.0, 1.0, 7), common::uniform(nv, n, 0.0, 0.3, 8))
        .pinned(true);
    let y = DataMatrix::new(evaluate_model(&theta_true).unwrap()).unwrap();
    let b0 = common::uniform(nv, n, 0.05, 0.3, 9);
    let vs = theta_true.variability.clone().unwrap();
    let theta0 =
        Theta::new(theta_true.m().clone(), theta_true.a().clone()).with_variability(vs.v, b0.clone()).pinned(true);
    let spec = ModelSpec::new(ModelKind::Slmm, Beta::KL, 1e12).unwrap();
    let mut c = cfg(1e-300, 100);
    c.blocks = BlockMask { variability: true, factors: false, proportions: false };
    let res = fit(&y, &spec, &theta0, &c).unwrap();
    assert_eq!(res.iterations, 100);
    assert!(frob(res.theta.b().unwrap()) <= 1e-6 * frob(&b0));
}

#[test]
fn exact_truth_is_a_fixed_point_of_every_block() {
    let (l, k, n, nv) = (8, 3, 25, 2);
    let truth = Theta::new(common::uniform(l, k, 0.2, 1.0, 11), common::stochastic(k, n, 12))
        .with_variability(common::uniform(l, nv, 0.0, 1.0, 13), common::uniform(nv, n, 0.0, 0.3, 14))
        .pinned(true);
    let y = DataMatrix::new(evaluate_model(&truth).unwrap()).unwrap();
    for b in [0.0, 0.5, 1.0, 1.5, 2.0] {
        let spec = ModelSpec::new(ModelKind::Slmm, Beta::new(b).unwrap(), 0.0).unwrap();
        let res = fit(&y, &spec, &truth, &cfg(1e-300, 1)).unwrap();
        assert!(common::max_abs_diff(res.theta.m(), truth.m()) <= 1e-12, "β = {b}");
        assert!(common::max_abs_diff(res.theta.a(), truth.a()) <= 1e-12, "β = {b}");
        assert!(common::max_abs_diff(res.theta.b().unwrap(), truth.b().unwrap()) <= 1e-12, "β = {b}");
    }
}

#[test]
fn converged_runs_end_on_the_stopping_rule() {
    let y = DataMatrix::new(common::uniform(6, 30, 0.1, 2.0, 20)).unwrap();
    let theta0 = Theta::new(common::uniform(6, 2, 0.2, 1.0, 21), common::uniform(2, 30, 0.2, 1.0, 22));
    let spec = ModelSpec::new(ModelKind::Nmf, Beta::KL, 0.0).unwrap();
    let res = fit(&y, &spec, &theta0, &cfg(1e-6, 10_000)).unwrap();
    assert_eq!(res.termination, Termination::Converged);
    let t = &res.objective_trace;
    let (prev, last) = (t[t.len() - 2], t[t.len() - 1]);
    assert!((prev - last) / prev < 1e-6);
    for w in t[..t.len() - 1].windows(2) {
        assert!((w[0] - w[1]) / w[0] >= 1e-6);
    }
    assert_eq!(res, fit(&y, &spec, &theta0, &cfg(1e-6, 10_000)).unwrap());
}

#[test]
fn mixing_updates_stay_monotone_on_the_corpus() {
    for seed in 0..4u64 {
        let (l, k, n, nv) = (10, 3, 60, 2);
        let y = DataMatrix::new(common::uniform(l, n, 0.1, 2.0, 100 + seed)).unwrap();
        for kind in [ModelKind::Lmm, ModelKind::Slmm] {
            for b in [1.0, 1.5, 2.0] {
                let mut theta0 =
                    Theta::new(common::uniform(l, k, 0.2, 1.5, 200 + seed), common::stochastic(k, n, 300 + seed));
                let lambda = if kind == ModelKind::Slmm { 1e-3 } else { 0.0 };
                if kind == ModelKind::Slmm {
                    theta0 = theta0
                        .with_variability(
                            common::uniform(l, nv, 0.0, 1.0, 400 + seed),
                            common::uniform(nv, n, 0.01, 0.2, 500 + seed),
                        )
                        .pinned(true);
                }
                let spec = ModelSpec::new(kind, Beta::new(b).unwrap(), lambda).unwrap();
                let mut c = cfg(1e-300, 150);
                c.use_xi_exponent = true;
                let mut watch = common::ConstraintWatch::new(kind);
                let res = fit_observed(&y, &spec, &theta0, &c, &mut watch).unwrap();
                assert_eq!(res.monotonicity_violations, 0, "{kind} β = {b} seed {seed}");
                assert!(watch.violations.is_empty(), "{:?}", &watch.violations[..1]);
            }
        }
    }
}

#[test]
fn penalty_matches_hand_l21() {
    assert_eq!(l21_norm(ndarray::array![[3.0, 0.0], [4.0, 0.0]].view()), 5.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn iterates_stay_feasible(seed in 0u64..10_000, b in 0.0f64..2.5, kind_ix in 0usize..3) {
        let kind = [ModelKind::Nmf, ModelKind::Lmm, ModelKind::Slmm][kind_ix];
        let (l, k, n, nv) = (6, 2, 15, 1);
        let y = DataMatrix::new(common::uniform(l, n, 0.05, 3.0, seed)).unwrap();
        let mut theta0 = Theta::new(common::uniform(l, k, 0.1, 1.0, seed + 1), common::stochastic(k, n, seed + 2));
        let mut lambda = 0.0;
        if kind == ModelKind::Slmm {
            theta0 = theta0.with_variability(common::uniform(l, nv, 0.0, 1.0, seed + 3), common::uniform(nv, n, 0.0, 0.2, seed + 4)).pinned(true);
            lambda = 1e-2;
        }
        let spec = ModelSpec::new(kind, Beta::new(b).unwrap(), lambda).unwrap();
        let mut watch = common::ConstraintWatch::new(kind);
        let res = fit_observed(&y, &spec, &theta0, &cfg(1e-300, 25), &mut watch).unwrap();
        prop_assert!(watch.violations.is_empty(), "{:?}", watch.violations.first());
        prop_assert!(check_constraints(kind, &res.theta).is_empty());
    }
}
