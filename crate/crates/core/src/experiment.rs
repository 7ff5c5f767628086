//! Config-driven pipelines and the Figure-2 style reproduction.
//!
//! Every (seed, tau) cell is independent and deterministic, so cells run on a
//! rayon pool (capped by `UOTKIT_THREADS`) and are written back in grid order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::config::{Coupling, Estimator, ExperimentConfig};
use crate::error::{Error, Result};
use crate::flow_matching::{self, integrate_batch, FmTrainConfig, OdeMethod};
use crate::io::{fmt_num, CsvTable};
use crate::measures::{CostMatrix, DatasetSpec, DiscreteMeasure, LabeledMeasure, Role};
use crate::metrics::{self, EvalReport};
use crate::monge_gap::{self, MgTrainConfig};
use crate::neural::AdamConfig;
use crate::solver::{self, SolverConfig, TransportPlan};
use crate::svg::{self, Plot};

/// Worker threads: `UOTKIT_THREADS` when set to a positive integer, else the
/// available parallelism.
pub fn thread_count() -> usize {
    std::env::var("UOTKIT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().map_err(|e| Error::Parse(format!("cannot start worker pool: {e}")))
}

/// Result of one (seed, tau) cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub seed: u64,
    pub tau: f64,
    pub report: EvalReport,
    pub loss_history: Vec<f64>,
    pub plan_diag: Vec<(&'static str, String)>,
    pub plot: Plot,
    /// `sinkhorn_div, mean_cost` for Monge-gap cells.
    pub map_result: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub cells: Vec<CellResult>,
    /// One line per failed cell.
    pub failures: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// Points whose label is one of the dataset's classes (drops outliers).
fn inliers(m: &LabeledMeasure, classes: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    let keep: Vec<usize> = (0..m.labels.len()).filter(|&i| m.labels[i] < classes).collect();
    if keep.is_empty() {
        return Err(Error::Empty("labelled points"));
    }
    Ok((m.measure.points().select(Axis(0), &keep), keep.iter().map(|&i| m.labels[i]).collect()))
}

/// `sum_ij P_ij |x_i - y_j| / sum P`: mean Euclidean displacement of a plan.
pub fn plan_displacement(plan: &TransportPlan, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> f64 {
    let mass = plan.total_mass();
    if mass <= 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, row) in plan.plan.rows().into_iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                let d: f64 = x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                total += p * d.sqrt();
            }
        }
    }
    total / mass
}

fn points2(x: ArrayView2<'_, f64>) -> Vec<[f64; 2]> {
    x.rows().into_iter().map(|r| [r[0], r.get(1).copied().unwrap_or(0.0)]).collect()
}

fn coupling_plot(title: &str, plan: &TransportPlan, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Plot {
    let mut pairs = Vec::new();
    let mut weights = Vec::new();
    for (i, row) in plan.plan.rows().into_iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                pairs.push((points2(x.row(i).insert_axis(Axis(0)))[0], points2(y.row(j).insert_axis(Axis(0)))[0]));
                weights.push(p);
            }
        }
    }
    Plot::new(title).segments(pairs, weights, svg::LINK_COLOR).points(points2(x), svg::SOURCE_COLOR).points(points2(y), svg::TARGET_COLOR)
}

fn map_plot(title: &str, from: ArrayView2<'_, f64>, to: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Plot {
    let arrows = points2(from).into_iter().zip(points2(to)).collect();
    Plot::new(title)
        .points(points2(target), svg::TARGET_COLOR)
        .points(points2(from), svg::SOURCE_COLOR)
        .arrows(arrows, svg::MAPPED_COLOR)
        .points(points2(to), svg::MAPPED_COLOR)
}

fn mean_tail(losses: &[f64], k: usize) -> f64 {
    let k = k.min(losses.len()).max(1);
    if losses.is_empty() {
        return 0.0;
    }
    losses[losses.len() - k..].iter().sum::<f64>() / k as f64
}

fn run_cell(cfg: &ExperimentConfig, seed: u64, tau: f64) -> Result<CellResult> {
    let spec = cfg.dataset.clone().with_seed(cfg.dataset.seed.wrapping_add(seed));
    let src = spec.sample(Role::Source)?;
    let tgt = spec.sample(Role::Target)?;
    let held = spec.held_out().sample(Role::Source)?;
    let classes = spec.num_classes();
    let mut report = EvalReport::new(spec.kind.name(), cfg.estimator.name(), tau, Some(seed));

    let solver_cfg = cfg.solver.with_tau(tau, tau);
    let plan = solver::solve_measures(&src.measure, &tgt.measure, &solver_cfg)?;
    let (dev_src, dev_tgt) = metrics::marginal_deviation(plan.plan.view(), src.measure.weights().view(), tgt.measure.weights().view())?;
    report.push("cross_cluster_mass", metrics::cross_cluster_mass(plan.plan.view(), &src.labels, &tgt.labels)?)?;
    report.push("plan_mass", plan.total_mass())?;
    report.push("marginal_deviation_source", dev_src)?;
    report.push("marginal_deviation_target", dev_tgt)?;
    report.push("plan_transport_cost", plan_displacement(&plan, src.measure.points(), tgt.measure.points()))?;
    let plan_diag = vec![
        ("epsilon", fmt_num(plan.epsilon)),
        ("iterations", plan.iterations_used.to_string()),
        ("converged", plan.converged.to_string()),
        ("potential_change", fmt_num(plan.potential_change)),
        ("marginal_residual", fmt_num(plan.marginal_residual)),
        ("total_mass", fmt_num(plan.total_mass())),
    ];
    if !plan.converged {
        log::warn!("seed {seed} tau {tau}: dataset coupling did not converge in {} sweeps", plan.iterations_used);
    }

    let t = &cfg.training;
    let adam = AdamConfig { learning_rate: t.learning_rate, ..AdamConfig::default() };
    let (held_pts, held_labels) = inliers(&held, classes)?;
    let title = format!("{} {} tau={} seed={seed}", cfg.estimator.name(), cfg.coupling.name(), fmt_num(tau));
    let mut loss_history = Vec::new();
    let mut map_result = None;
    let plot = match cfg.estimator {
        Estimator::CouplingOnly => coupling_plot(&title, &plan, src.measure.points(), tgt.measure.points()),
        Estimator::Fm => {
            let fm_cfg = FmTrainConfig {
                coupling_mode: cfg.coupling.fm_mode(),
                solver: solver_cfg.with_tolerance(t.batch_tolerance),
                batch_size: t.batch_size,
                iterations: t.iterations,
                sigma: t.sigma,
                adam,
                hidden: t.hidden.clone(),
                seed,
            };
            let trained = flow_matching::train_fm(&src.measure, &tgt.measure, &fm_cfg)?;
            let end = integrate_batch(&trained.field, held_pts.view(), t.ode_steps, t.ode_method)?;
            report.push("cluster_preservation", metrics::map_class_consistency(end.view(), &held_labels, tgt.measure.points(), &tgt.labels)?)?;
            report.push("transport_cost", flow_matching::mean_displacement(held_pts.view(), end.view()))?;
            report.push("final_loss", mean_tail(&trained.loss_history, 100))?;
            report.push("fallbacks", trained.fallbacks as f64)?;
            loss_history = trained.loss_history;
            map_plot(&title, held_pts.view(), end.view(), tgt.measure.points())
        }
        Estimator::MongeGap => {
            let gap_cfg = SolverConfig::default().with_epsilon_scale(t.gap_epsilon_scale).with_tolerance(t.batch_tolerance);
            let mg_cfg = MgTrainConfig {
                fitting: gap_cfg,
                gap: gap_cfg,
                fitting_weight: t.fitting_weight,
                gap_weight: t.gap_weight,
                coupling_mode: cfg.coupling.mg_mode(),
                rebalance: solver_cfg.with_tolerance(t.batch_tolerance),
                batch_size: t.batch_size,
                iterations: t.iterations,
                adam,
                hidden: t.hidden.clone(),
                seed,
            };
            let trained = monge_gap::train_mg(&src.measure, &tgt.measure, &mg_cfg)?;
            let mapped = trained.map.apply(held_pts.view())?;
            // Evaluation always uses the balanced measures.
            let pushed = DiscreteMeasure::uniform(mapped.clone())?;
            let div = solver::sinkhorn_divergence(&pushed, &tgt.measure.normalized(), &cfg.solver.with_tau(1.0, 1.0))?;
            let mean_cost = CostMatrix::sq_euclidean(held_pts.view(), mapped.view())?.entries().diag().mean().unwrap_or(0.0);
            report.push("class_consistency", metrics::map_class_consistency(mapped.view(), &held_labels, tgt.measure.points(), &tgt.labels)?)?;
            report.push("sinkhorn_div", div.value)?;
            report.push("mean_cost", mean_cost)?;
            report.push("final_loss", mean_tail(&trained.loss_history, 100))?;
            map_result = Some((div.value, mean_cost));
            loss_history = trained.loss_history;
            map_plot(&title, held_pts.view(), mapped.view(), tgt.measure.points())
        }
    };
    Ok(CellResult { seed, tau, report, loss_history, plan_diag, plot, map_result })
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".uotkit-write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    Ok(())
}

/// Runs every (seed, tau) cell of the configuration and writes `metrics.csv`,
/// `loss_history.csv`, `plan_diag.csv`, `summary.csv`, one SVG per cell and,
/// for the Monge gap, `results.csv`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_with_threads(cfg, thread_count())
}

pub fn run_with_threads(cfg: &ExperimentConfig, threads: usize) -> Result<RunOutcome> {
    cfg.validate()?;
    prepare_dir(&cfg.output)?;
    let grid: Vec<(u64, f64)> = cfg.seeds.iter().flat_map(|&s| cfg.effective_taus().into_iter().map(move |t| (s, t))).collect();
    let results: Vec<Result<CellResult>> = pool(threads)?.install(|| grid.par_iter().map(|&(s, t)| run_cell(cfg, s, t)).collect());

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for ((seed, tau), r) in grid.iter().zip(results) {
        match r {
            Ok(c) => cells.push(c),
            Err(e) => failures.push(format!("seed {seed} tau {}: {e}", fmt_num(*tau))),
        }
    }
    let files = write_run(cfg, &cells)?;
    Ok(RunOutcome { cells, failures, files })
}

fn write_run(cfg: &ExperimentConfig, cells: &[CellResult]) -> Result<Vec<PathBuf>> {
    let out = &cfg.output;
    let mut files = Vec::new();
    let names: Vec<String> = cells.first().map(|c| c.report.metrics.iter().map(|m| m.name.clone()).collect()).unwrap_or_default();

    let mut header = vec!["seed", "tau", "estimator", "coupling_mode"];
    header.extend(names.iter().map(String::as_str));
    let mut metrics_csv = CsvTable::new(&header);
    let mut loss_csv = CsvTable::new(&["seed", "tau", "iter", "loss"]);
    let mut diag_csv = CsvTable::new(&["seed", "tau", "epsilon", "iterations", "converged", "potential_change", "marginal_residual", "total_mass"]);
    let mut results_csv = CsvTable::new(&["dataset", "mode", "tau", "sinkhorn_div", "mean_cost"]);
    for c in cells {
        let (seed, tau) = (c.seed.to_string(), fmt_num(c.tau));
        let mut row = vec![seed.clone(), tau.clone(), cfg.estimator.name().to_string(), cfg.coupling.name().to_string()];
        row.extend(c.report.metrics.iter().map(|m| fmt_num(m.value)));
        metrics_csv.push(row);
        for (k, l) in c.loss_history.iter().enumerate() {
            loss_csv.push(vec![seed.clone(), tau.clone(), k.to_string(), fmt_num(*l)]);
        }
        let mut diag = vec![seed.clone(), tau.clone()];
        diag.extend(c.plan_diag.iter().map(|(_, v)| v.clone()));
        diag_csv.push(diag);
        if let Some((div, cost)) = c.map_result {
            results_csv.push(vec![c.report.dataset.clone(), cfg.coupling.name().to_string(), tau.clone(), fmt_num(div), fmt_num(cost)]);
        }
        let path = out.join(format!("plot_seed{seed}_tau{tau}.svg"));
        crate::io::write_atomic(&path, c.plot.render().as_bytes())?;
        files.push(path);
    }
    let mut summary_csv = CsvTable::new(&["tau", "metric", "mean", "std", "runs"]);
    for tau in cfg.effective_taus() {
        let group: Vec<EvalReport> = cells.iter().filter(|c| c.tau == tau).map(|c| c.report.clone()).collect();
        if group.is_empty() {
            continue;
        }
        let agg = metrics::summarize(&group)?;
        for m in &agg.metrics {
            summary_csv.push(vec![fmt_num(tau), m.name.clone(), fmt_num(m.value), fmt_num(m.std), group.len().to_string()]);
        }
    }
    let mut tables = vec![("metrics.csv", &metrics_csv), ("loss_history.csv", &loss_csv), ("plan_diag.csv", &diag_csv), ("summary.csv", &summary_csv)];
    if cfg.estimator == Estimator::MongeGap {
        tables.push(("results.csv", &results_csv));
    }
    for (name, table) in tables {
        let path = out.join(name);
        table.write(&path)?;
        files.push(path);
    }
    Ok(files)
}

/// Settings of the Figure-2 reproduction.
#[derive(Debug, Clone, PartialEq)]
pub struct Fig2Options {
    pub output: PathBuf,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub ode_steps: usize,
    /// Absolute eps of every coupling, as in the simulated-data experiment.
    pub epsilon: f64,
    pub batch_tolerance: f64,
    pub threads: usize,
}

impl Fig2Options {
    pub fn new(output: impl Into<PathBuf>) -> Self {
        Self {
            output: output.into(),
            seed: 0,
            iterations: 5000,
            batch_size: 128,
            hidden: vec![128, 128, 128],
            learning_rate: 1e-3,
            ode_steps: 100,
            epsilon: 0.1,
            batch_tolerance: 1e-4,
            threads: thread_count(),
        }
    }
}

/// One row of the Figure-2 metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct Fig2Row {
    pub panel: char,
    pub method: &'static str,
    pub tau: f64,
    pub cross_cluster_mass: f64,
    pub cluster_preservation: f64,
    pub transport_cost: f64,
}

#[derive(Debug, Clone)]
pub struct Fig2Outcome {
    pub rows: Vec<Fig2Row>,
    pub files: Vec<PathBuf>,
}

enum Fig2Job {
    Coupling(char, &'static str, f64),
    Flow(char, &'static str, Coupling, f64),
}

struct Fig2Panel {
    row: Fig2Row,
    plot: Plot,
    losses: Vec<f64>,
}

/// Runs the mixture-of-uniforms experiment: couplings at tau in
/// {1, 0.99, 0.9} (panels b-d) and FM, OT-FM, UOT-FM(0.99), UOT-FM(0.9)
/// (panels e-h), with the data itself in panel a.
pub fn reproduce_fig2(opts: &Fig2Options) -> Result<Fig2Outcome> {
    prepare_dir(&opts.output)?;
    let spec = DatasetSpec::uniform_mixture(opts.seed);
    let src = spec.sample(Role::Source)?;
    let tgt = spec.sample(Role::Target)?;
    let held = spec.held_out().sample(Role::Source)?;
    let jobs = [
        Fig2Job::Coupling('b', "ot", 1.0),
        Fig2Job::Coupling('c', "uot", 0.99),
        Fig2Job::Coupling('d', "uot", 0.9),
        Fig2Job::Flow('e', "fm", Coupling::Independent, 1.0),
        Fig2Job::Flow('f', "ot_fm", Coupling::Balanced, 1.0),
        Fig2Job::Flow('g', "uot_fm", Coupling::Unbalanced, 0.99),
        Fig2Job::Flow('h', "uot_fm", Coupling::Unbalanced, 0.9),
    ];
    let run_job = |job: &Fig2Job| -> Result<Fig2Panel> {
        match *job {
            Fig2Job::Coupling(panel, method, tau) => {
                let cfg = SolverConfig::unbalanced(tau).with_epsilon_abs(opts.epsilon);
                let plan = solver::solve_measures(&src.measure, &tgt.measure, &cfg)?;
                let cross = metrics::cross_cluster_mass(plan.plan.view(), &src.labels, &tgt.labels)?;
                let row = Fig2Row {
                    panel,
                    method,
                    tau,
                    cross_cluster_mass: cross,
                    cluster_preservation: 1.0 - cross,
                    transport_cost: plan_displacement(&plan, src.measure.points(), tgt.measure.points()),
                };
                let plot = coupling_plot(&format!("({panel}) {method} tau={}", fmt_num(tau)), &plan, src.measure.points(), tgt.measure.points());
                Ok(Fig2Panel { row, plot, losses: Vec::new() })
            }
            Fig2Job::Flow(panel, method, coupling, tau) => {
                let fm_cfg = FmTrainConfig {
                    coupling_mode: coupling.fm_mode(),
                    solver: SolverConfig::unbalanced(tau).with_epsilon_abs(opts.epsilon).with_tolerance(opts.batch_tolerance),
                    batch_size: opts.batch_size,
                    iterations: opts.iterations,
                    sigma: 0.0,
                    adam: AdamConfig { learning_rate: opts.learning_rate, ..AdamConfig::default() },
                    hidden: opts.hidden.clone(),
                    seed: opts.seed,
                };
                let trained = flow_matching::train_fm(&src.measure, &tgt.measure, &fm_cfg)?;
                let x0 = held.measure.points();
                let end = integrate_batch(&trained.field, x0, opts.ode_steps, OdeMethod::Rk4)?;
                let preserved = metrics::map_class_consistency(end.view(), &held.labels, tgt.measure.points(), &tgt.labels)?;
                let row = Fig2Row {
                    panel,
                    method,
                    tau,
                    cross_cluster_mass: 1.0 - preserved,
                    cluster_preservation: preserved,
                    transport_cost: flow_matching::mean_displacement(x0, end.view()),
                };
                let title = if tau < 1.0 { format!("({panel}) {method} tau={}", fmt_num(tau)) } else { format!("({panel}) {method}") };
                let plot = map_plot(&title, x0, end.view(), tgt.measure.points());
                Ok(Fig2Panel { row, plot, losses: trained.loss_history })
            }
        }
    };
    let panels: Vec<Result<Fig2Panel>> = pool(opts.threads)?.install(|| jobs.par_iter().map(run_job).collect());
    let panels: Vec<Fig2Panel> = panels.into_iter().collect::<Result<_>>()?;

    let data_plot = Plot::new("(a) data").points(points2(src.measure.points()), svg::SOURCE_COLOR).points(points2(tgt.measure.points()), svg::TARGET_COLOR);
    let bounds = data_plot.data_bounds();
    let mut plots = vec![data_plot.with_bounds(bounds)];
    plots.extend(panels.iter().map(|p| p.plot.clone().with_bounds(bounds)));

    let mut files = Vec::new();
    for (plot, panel) in plots.iter().zip("abcdefgh".chars()) {
        let path = opts.output.join(format!("fig2_{panel}.svg"));
        crate::io::write_atomic(&path, plot.render().as_bytes())?;
        files.push(path);
    }
    let combined = opts.output.join("fig2.svg");
    crate::io::write_atomic(&combined, svg::grid(&plots, 4).as_bytes())?;
    files.push(combined);

    let mut metrics_csv = CsvTable::new(&["panel", "method", "tau", "cross_cluster_mass", "cluster_preservation", "transport_cost"]);
    let mut loss_csv = CsvTable::new(&["panel", "method", "tau", "iter", "loss"]);
    for p in &panels {
        let r = &p.row;
        metrics_csv.push(vec![
            r.panel.to_string(),
            r.method.to_string(),
            fmt_num(r.tau),
            fmt_num(r.cross_cluster_mass),
            fmt_num(r.cluster_preservation),
            fmt_num(r.transport_cost),
        ]);
        for (k, l) in p.losses.iter().enumerate() {
            loss_csv.push(vec![r.panel.to_string(), r.method.to_string(), fmt_num(r.tau), k.to_string(), fmt_num(*l)]);
        }
    }
    for (name, table) in [("metrics.csv", &metrics_csv), ("loss_history.csv", &loss_csv)] {
        let path = opts.output.join(name);
        table.write(&path)?;
        files.push(path);
    }
    Ok(Fig2Outcome { rows: panels.into_iter().map(|p| p.row).collect(), files })
}

/// One line of the gradient suite.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckLine {
    pub name: &'static str,
    pub error: f64,
    pub threshold: f64,
}

impl GradCheckLine {
    pub fn passed(&self) -> bool {
        self.error <= self.threshold
    }
}

/// Finite-difference checks of every training loss on small seeded instances:
/// flow matching and reweighting losses through the network parameters, and
/// the Monge-gap envelope gradient through the mapped points.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckLine>> {
    use crate::neural::{grad_check, mse_loss_and_grad};
    use crate::rng;
    use rand::Rng as _;
    let mut rng = rng::seeded(seed, rng::stream::GRAD_CHECK);
    let mut sample = |n: usize, d: usize, shift: f64| Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0 + shift);

    let x0 = sample(16, 2, 0.0);
    let x1 = sample(16, 2, 2.0);
    let t = ndarray::Array1::linspace(0.05, 0.95, 16);
    let batch = flow_matching::FlowBatch::new(x0, x1, t, None)?;
    let field = flow_matching::velocity_net(2, &[16, 16], seed)?;
    let fm = grad_check(&field, |net| flow_matching::fm_loss_and_grad(net, &batch), 200, seed)?;

    let xs = sample(16, 2, 0.0);
    let ys = xs.column(0).mapv(|v| if v > 0.0 { 2.0 } else { 0.5 });
    let u = crate::rebalance::reweighting_net(2, &[16, 16], seed)?;
    let rw = grad_check(&u, |net| mse_loss_and_grad(net, xs.view(), ys.view()), 200, seed)?;

    let points = sample(5, 2, 0.0);
    let mapped = sample(5, 2, 0.5);
    let targets = sample(5, 2, 1.0);
    let tight = SolverConfig::default().with_tolerance(1e-11).with_max_iters(100_000);
    let mg_cfg = MgTrainConfig { fitting: tight, gap: tight, ..MgTrainConfig::default() };
    let mg = monge_gap::point_gradient_error(points.view(), mapped.view(), targets.view(), &mg_cfg, 1e-5)?;

    Ok(vec![
        GradCheckLine { name: "fm_loss", error: fm.max_relative_error, threshold: 1e-4 },
        GradCheckLine { name: "reweighting_loss", error: rw.max_relative_error, threshold: 1e-4 },
        GradCheckLine { name: "monge_gap_envelope", error: mg, threshold: 1e-3 },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coupling_only_grid_writes_one_row_per_tau() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            taus: vec![1.0, 0.99, 0.9],
            solver: SolverConfig::default().with_epsilon_abs(0.1),
            output: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        let outcome = run_with_threads(&cfg, 2).unwrap();
        assert!(outcome.failures.is_empty());
        let table = CsvTable::parse(&fs::read_to_string(dir.path().join("metrics.csv")).unwrap()).unwrap();
        assert_eq!(table.rows.len(), 3);
        let col = table.column("cross_cluster_mass").unwrap();
        let cross: Vec<f64> = table.rows.iter().map(|r| r[col].parse().unwrap()).collect();
        assert!(cross[0] >= 0.2 - 1e-6 && cross[2] <= cross[1] && cross[1] <= cross[0], "{cross:?}");
        for f in ["loss_history.csv", "plan_diag.csv", "summary.csv", "plot_seed0_tau0.9.svg"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn gradient_suite_passes() {
        for line in gradient_suite(3).unwrap() {
            assert!(line.passed(), "{line:?}");
        }
    }

    #[test]
    fn thread_count_is_positive() {
        assert!(thread_count() >= 1);
    }
}
