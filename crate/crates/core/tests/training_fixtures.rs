use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use uotkit::config::ExperimentConfig;
use uotkit::experiment;
use uotkit::flow_matching::{
    fm_loss_and_grad, integrate_batch, make_training_batch, train_fm, velocity_net, CouplingMode, FlowBatch, FmTrainConfig, OdeMethod,
};
use uotkit::metrics::summarize;
use uotkit::monge_gap::{monge_gap, train_mg, MgTrainConfig};
use uotkit::rng;
use uotkit::{AdamConfig, DiscreteMeasure, SolverConfig};

fn gaussian_1d(n: usize, mean: f64, std: f64, seed: u64) -> DiscreteMeasure {
    let normal = Normal::new(mean, std).unwrap();
    let mut r = rng::seeded(seed, rng::stream::SOURCE);
    DiscreteMeasure::uniform(Array2::from_shape_fn((n, 1), |_| normal.sample(&mut r))).unwrap()
}

fn mean_of(x: &Array2<f64>) -> f64 {
    x.mean_axis(Axis(0)).unwrap()[0]
}

#[test]
fn fm_loss_matches_direct_formula() {
    let mut r = rng::seeded(5, rng::stream::TRAIN);
    let x0 = Array2::from_shape_fn((9, 3), |_| r.random::<f64>() * 2.0 - 1.0);
    let x1 = Array2::from_shape_fn((9, 3), |_| r.random::<f64>() * 2.0 + 1.0);
    let t = Array1::from_shape_fn(9, |_| r.random::<f64>());
    let batch = FlowBatch::new(x0.clone(), x1.clone(), t.clone(), None).unwrap();
    let net = velocity_net(3, &[16, 16, 16], 2).unwrap();
    let (loss, _) = fm_loss_and_grad(&net, &batch).unwrap();

    let mut direct = 0.0;
    for i in 0..9 {
        let xt: Vec<f64> = (0..3).map(|k| (1.0 - t[i]) * x0[[i, k]] + t[i] * x1[[i, k]]).collect();
        let v = net.forward(&xt, Some(t[i])).unwrap();
        direct += (0..3).map(|k| (v[k] - (x1[[i, k]] - x0[[i, k]])).powi(2)).sum::<f64>();
    }
    direct /= 9.0;
    assert!((loss - direct).abs() <= 1e-12, "{loss} vs {direct}");
}

#[test]
fn balanced_ot_batch_follows_the_cheaper_pairing() {
    // Identity pairing costs 2 * 0.01, the swap 2 * 98.01: the LP optimum is the identity.
    let x = ndarray::array![[0.0, 0.0], [10.0, 0.0]];
    let y = ndarray::array![[0.1, 0.0], [9.9, 0.0]];
    let cfg = FmTrainConfig { coupling_mode: CouplingMode::BalancedOt, batch_size: 2, ..FmTrainConfig::default() };
    let mut r = rng::seeded(0, rng::stream::TRAIN);
    for _ in 0..50 {
        let (batch, fell_back) = make_training_batch(x.view(), y.view(), &cfg, &mut r).unwrap();
        assert!(!fell_back);
        for (a, b) in batch.x0.rows().into_iter().zip(batch.x1.rows()) {
            assert!((a[0] - b[0]).abs() < 0.2, "pair {a} -> {b}");
        }
    }
}

fn shift_config(iterations: usize) -> FmTrainConfig {
    FmTrainConfig {
        batch_size: 64,
        iterations,
        hidden: vec![64, 64],
        adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
        ..FmTrainConfig::default()
    }
}

#[test]
fn flow_matching_learns_a_shift() {
    let mu = gaussian_1d(500, 0.0, 0.1, 0);
    let nu = gaussian_1d(500, 5.0, 0.1, 1);
    let cfg = shift_config(2000);
    let trained = train_fm(&mu, &nu, &cfg).unwrap();
    let held = gaussian_1d(300, 0.0, 0.1, 2);
    let rk4 = integrate_batch(&trained.field, held.points(), 100, OdeMethod::Rk4).unwrap();
    assert!((mean_of(&rk4) - 5.0).abs() <= 0.25, "mapped mean {}", mean_of(&rk4));

    // Euler with ten times the steps agrees with RK4 on the trained field.
    let euler = integrate_batch(&trained.field, held.points(), 1000, OdeMethod::Euler).unwrap();
    let disp = (&rk4 - &held.points()).mapv(f64::abs).sum();
    let diff = (&rk4 - &euler).mapv(f64::abs).sum();
    assert!(diff <= 1e-2 * disp, "euler/rk4 relative gap {}", diff / disp);

    let h = &trained.loss_history;
    let head = h[..100].iter().sum::<f64>() / 100.0;
    let tail = h[h.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(tail < head, "loss did not decrease: {head} -> {tail}");
}

#[test]
fn flow_training_is_deterministic() {
    let mu = gaussian_1d(100, 0.0, 0.1, 0);
    let nu = gaussian_1d(100, 5.0, 0.1, 1);
    for mode in [CouplingMode::Independent, CouplingMode::UnbalancedOt] {
        let cfg = FmTrainConfig { coupling_mode: mode, solver: SolverConfig::unbalanced(0.9), ..shift_config(30) };
        let a = train_fm(&mu, &nu, &cfg).unwrap();
        let b = train_fm(&mu, &nu, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.field.params(), b.field.params());
    }
}

#[test]
fn monge_gap_training_learns_a_shift() {
    let mu = gaussian_1d(400, 0.0, 0.1, 3);
    let nu = gaussian_1d(400, 3.0, 0.1, 4);
    // A fixed fitting eps keeps the debiased divergence cheap once the map has converged.
    let fitting = SolverConfig::default().with_epsilon_abs(0.01);
    let cfg = MgTrainConfig { fitting, batch_size: 64, iterations: 600, hidden: vec![32, 32], ..MgTrainConfig::default() };
    let trained = train_mg(&mu, &nu, &cfg).unwrap();
    let held = gaussian_1d(300, 0.0, 0.1, 5);
    let mapped = trained.map.apply(held.points()).unwrap();
    assert!((mean_of(&mapped) - 3.0).abs() <= 0.2, "mapped mean {}", mean_of(&mapped));
}

#[test]
fn monge_gap_is_nonnegative_up_to_bias() {
    let cfg = SolverConfig::default().with_tolerance(1e-9).with_max_iters(50_000);
    let mut r = rng::seeded(8, rng::stream::TRAIN);
    for k in 0..100 {
        let n = 3 + k % 6;
        let x = Array2::from_shape_fn((n, 2), |_| r.random::<f64>() * 4.0 - 2.0);
        let tx = Array2::from_shape_fn((n, 2), |_| r.random::<f64>() * 4.0 - 2.0);
        let gap = monge_gap(x.view(), tx.view(), &cfg).unwrap();
        assert!(gap.value >= -gap.bias_bound - 1e-9, "map {k}: gap {} bias {}", gap.value, gap.bias_bound);
    }
}

#[test]
fn five_seed_summary_has_finite_spread() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "[dataset]\nkind = gaussian_imbalance\n[estimator]\nname = coupling_only\ntaus = 0.9\n[run]\nseeds = 0, 1, 2, 3, 4\noutput = {}\n",
        dir.path().display()
    );
    let cfg = ExperimentConfig::parse(&text).unwrap();
    let outcome = experiment::run_with_threads(&cfg, 2).unwrap();
    assert!(outcome.failures.is_empty());
    let reports: Vec<_> = outcome.cells.iter().map(|c| c.report.clone()).collect();
    let summary = summarize(&reports).unwrap();
    assert!(summary.metrics.iter().all(|m| m.std.is_finite()));
    assert!(summary.metrics.iter().any(|m| m.std > 0.0));
    let written = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(written.lines().count() > 1);
}
