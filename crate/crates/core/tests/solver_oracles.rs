use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use uotkit::metrics::{cross_cluster_mass, marginal_deviation};
use uotkit::solver::{plan_cost, solve_measures};
use uotkit::{cost_matrix, solve, tau_to_lambda, CostMatrix, DatasetSpec, DiscreteMeasure, GroundCost, Role, SolverConfig};

fn points(rows: Vec<Vec<f64>>) -> DiscreteMeasure {
    uotkit::make_measure(rows, None).unwrap()
}

// Objective of P = [[p, .5-p], [.5-p, p]] with C = [[0,1],[1,0]] under
// <P,C> + eps KL(P | a (x) b), a = b = (.5, .5).
fn two_by_two_objective(p: f64, eps: f64) -> f64 {
    let q = 0.5 - p;
    let xlogx = |v: f64, r: f64| if v > 0.0 { v * (v / r).ln() } else { 0.0 };
    2.0 * q + eps * 2.0 * (xlogx(p, 0.25) + xlogx(q, 0.25))
}

#[test]
fn two_by_two_entropic_plan_matches_scan_and_bisection() {
    let eps = 0.05;
    // Coarse scan for the bracketing cell, then bisection on a numerical slope.
    let grid = 10_000;
    let best = (1..grid).map(|k| 0.5 * k as f64 / grid as f64).min_by(|a, b| two_by_two_objective(*a, eps).total_cmp(&two_by_two_objective(*b, eps))).unwrap();
    let (mut lo, mut hi) = ((best - 0.5 / grid as f64).max(1e-15), (best + 0.5 / grid as f64).min(0.5 - 1e-15));
    let slope = |p: f64| {
        let h = 1e-9;
        (two_by_two_objective(p + h, eps) - two_by_two_objective(p - h, eps)) / (2.0 * h)
    };
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let p_star = 0.5 * (lo + hi);

    let cost = CostMatrix::from_entries(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
    let a = array![0.5, 0.5];
    let cfg = SolverConfig::balanced().with_epsilon_abs(eps).with_tolerance(1e-12).with_max_iters(100_000);
    let plan = solve(a.view(), a.view(), &cost, &cfg).unwrap();
    assert!(plan.converged);
    for (got, want) in plan.plan.iter().zip([p_star, 0.5 - p_star, 0.5 - p_star, p_star]) {
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
}

#[test]
fn scalar_unbalanced_closed_form() {
    // d/dP [P c + (eps + 2 lambda)(P ln P - P + 1)] = 0  =>  P = exp(-c / (2 lambda + eps)).
    for (c, tau, eps) in [(0.3, 0.5, 0.1), (2.0, 0.9, 0.5), (0.0, 0.7, 1.0), (5.0, 0.99, 0.05)] {
        let lambda = tau_to_lambda(tau, eps).unwrap().value();
        let want = (-c / (2.0 * lambda + eps)).exp();
        let cost = CostMatrix::from_entries(array![[c]]).unwrap();
        let cfg = SolverConfig::unbalanced(tau).with_epsilon_abs(eps).with_tolerance(1e-13).with_max_iters(1_000_000);
        let plan = solve(array![1.0].view(), array![1.0].view(), &cost, &cfg).unwrap();
        assert!((plan.plan[[0, 0]] - want).abs() <= 1e-8, "c={c} tau={tau} eps={eps}: {} vs {want}", plan.plan[[0, 0]]);
    }
}

#[test]
fn plan_cost_matches_double_loop() {
    let p = array![[0.1, 0.05, 0.2], [0.0, 0.3, 0.01], [0.07, 0.02, 0.25]];
    let c = array![[1.5, 0.2, 3.1], [0.7, 0.0, 2.2], [4.4, 1.1, 0.9]];
    let mut naive = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            naive += p[[i, j]] * c[[i, j]];
        }
    }
    let got = plan_cost(p.view(), &CostMatrix::from_entries(c).unwrap()).unwrap();
    assert!((got - naive).abs() <= 1e-12);
}

#[test]
fn simulated_data_couplings() {
    let spec = DatasetSpec::uniform_mixture(0);
    let src = spec.sample(Role::Source).unwrap();
    let tgt = spec.sample(Role::Target).unwrap();
    let balanced = solve_measures(&src.measure, &tgt.measure, &SolverConfig::balanced().with_epsilon_abs(0.1)).unwrap();
    let cross = cross_cluster_mass(balanced.plan.view(), &src.labels, &tgt.labels).unwrap();
    assert!(cross >= 0.2 - 1e-6 && cross <= 0.21, "balanced cross mass {cross}");

    let unbalanced = solve_measures(&src.measure, &tgt.measure, &SolverConfig::unbalanced(0.9).with_epsilon_abs(0.1)).unwrap();
    let (dev_src, _) = marginal_deviation(unbalanced.plan.view(), src.measure.weights().view(), tgt.measure.weights().view()).unwrap();
    assert!(dev_src > 1e-3, "source deviation {dev_src}");
}

#[test]
fn balanced_marginals_within_tolerance() {
    let spec = DatasetSpec::gaussian_imbalance(4);
    let src = spec.sample(Role::Source).unwrap();
    let tgt = spec.sample(Role::Target).unwrap();
    let cfg = SolverConfig::balanced().with_tolerance(1e-7);
    let plan = solve_measures(&src.measure, &tgt.measure, &cfg).unwrap();
    assert!(plan.converged);
    let (r, c) = marginal_deviation(plan.plan.view(), src.measure.weights().view(), tgt.measure.weights().view()).unwrap();
    assert!(r <= 1e-7 && c <= 1e-7, "{r} {c}");
}

fn cloud(max_n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_n).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 3), n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cost_matrix_matches_brute_force(x in cloud(6), y in cloud(6)) {
        let c = cost_matrix(&points(x.clone()), &points(y.clone()), GroundCost::SqEuclidean).unwrap();
        for (i, xi) in x.iter().enumerate() {
            for (j, yj) in y.iter().enumerate() {
                let d: f64 = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
                prop_assert!((c.entries()[[i, j]] - d).abs() <= 1e-9 * (1.0 + d));
            }
        }
    }

    #[test]
    fn cross_mass_matches_double_loop(
        (n, m, entries, src_labels, tgt_labels) in (1usize..6, 1usize..6).prop_flat_map(|(n, m)| (
            Just(n), Just(m),
            prop::collection::vec(0.0..1.0f64, n * m),
            prop::collection::vec(0usize..3, n),
            prop::collection::vec(0usize..3, m),
        ))
    ) {
        let plan = Array2::from_shape_vec((n, m), entries).unwrap();
        let got = cross_cluster_mass(plan.view(), &src_labels, &tgt_labels).unwrap();
        let (mut cross, mut total) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..m {
                total += plan[[i, j]];
                if src_labels[i] != tgt_labels[j] {
                    cross += plan[[i, j]];
                }
            }
        }
        let want = if total > 0.0 { cross / total } else { 0.0 };
        prop_assert!((0.0..=1.0).contains(&got));
        prop_assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn unbalanced_plan_is_nonnegative_and_consistent(x in cloud(5), y in cloud(5), tau in 0.3..1.0f64) {
        let (mu, nu) = (points(x), points(y));
        let plan = solve_measures(&mu, &nu, &SolverConfig::unbalanced(tau)).unwrap();
        prop_assert!(plan.plan.iter().all(|&p| p >= 0.0 && p.is_finite()));
        let rows: Array1<f64> = plan.plan.sum_axis(ndarray::Axis(1));
        prop_assert!((&rows - &plan.row_marginal).iter().all(|d| d.abs() <= 1e-12));
    }
}
