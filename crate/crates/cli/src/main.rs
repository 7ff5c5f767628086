use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use uotkit::config::ExperimentConfig;
use uotkit::experiment::{self, Fig2Options};
use uotkit::io::{self, fmt_num};
use uotkit::solver::{self, SolverConfig};

#[derive(Parser)]
#[command(name = "uotkit", version, about = "Unbalanced optimal transport and neural Monge map experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one (un)balanced entropic problem between two measure CSVs.
    Solve {
        source: PathBuf,
        target: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        tau1: f64,
        #[arg(long, default_value_t = 1.0)]
        tau2: f64,
        /// eps as a multiple of the mean cost.
        #[arg(long, conflicts_with = "epsilon_abs")]
        epsilon_scale: Option<f64>,
        /// Absolute eps.
        #[arg(long)]
        epsilon_abs: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        /// Plan CSV destination.
        #[arg(long, default_value = "plan.csv")]
        out: PathBuf,
    },
    /// Run every seed x tau cell of an experiment config.
    Run { config: PathBuf },
    /// Reproduce the mixture-of-uniforms figure: 8 panels plus metrics.csv.
    #[command(name = "reproduce-fig2")]
    ReproduceFig2 {
        #[arg(long, default_value = "fig2")]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference checks of every training gradient.
    #[command(name = "grad-check")]
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn solve_cmd(
    source: PathBuf,
    target: PathBuf,
    tau: (f64, f64),
    epsilon_scale: Option<f64>,
    epsilon_abs: Option<f64>,
    max_iters: Option<usize>,
    tol: Option<f64>,
    out: PathBuf,
) -> anyhow::Result<()> {
    let mut cfg = SolverConfig::default().with_tau(tau.0, tau.1);
    if let Some(s) = epsilon_scale {
        cfg = cfg.with_epsilon_scale(s);
    }
    if let Some(e) = epsilon_abs {
        cfg = cfg.with_epsilon_abs(e);
    }
    if let Some(m) = max_iters {
        cfg = cfg.with_max_iters(m);
    }
    if let Some(t) = tol {
        cfg = cfg.with_tolerance(t);
    }
    cfg.validate()?;
    let src = io::read_measure(&source).with_context(|| format!("reading {}", source.display()))?;
    let tgt = io::read_measure(&target).with_context(|| format!("reading {}", target.display()))?;
    let plan = solver::solve_measures(&src.measure, &tgt.measure, &cfg)?;
    io::write_atomic(&out, io::plan_to_csv(&plan.plan).as_bytes()).with_context(|| format!("writing {}", out.display()))?;

    let list = |v: &ndarray::Array1<f64>| v.iter().map(|&x| fmt_num(x)).collect::<Vec<_>>().join(" ");
    let diag = [
        ("rows", plan.plan.nrows().to_string()),
        ("cols", plan.plan.ncols().to_string()),
        ("epsilon", fmt_num(plan.epsilon)),
        ("iterations", plan.iterations_used.to_string()),
        ("converged", plan.converged.to_string()),
        ("potential_change", fmt_num(plan.potential_change)),
        ("marginal_residual", fmt_num(plan.marginal_residual)),
        ("total_mass", fmt_num(plan.total_mass())),
        ("transported_cost", fmt_num(plan.transported_cost)),
        ("row_marginal", list(&plan.row_marginal)),
        ("col_marginal", list(&plan.col_marginal)),
        ("plan", out.display().to_string()),
    ];
    print!("{}", io::key_values(&diag));
    if !plan.converged {
        log::warn!("solver stopped after {} sweeps without converging", plan.iterations_used);
    }
    Ok(())
}

fn run_cmd(config: PathBuf) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
    let outcome = experiment::run(&cfg)?;
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    if !outcome.failures.is_empty() {
        for line in &outcome.failures {
            eprintln!("error: {line}");
        }
        bail!("{} of {} cells failed", outcome.failures.len(), outcome.failures.len() + outcome.cells.len());
    }
    Ok(())
}

fn fig2_cmd(out: PathBuf, iterations: Option<usize>, seed: Option<u64>) -> anyhow::Result<()> {
    let mut opts = Fig2Options::new(out);
    if let Some(n) = iterations {
        opts.iterations = n;
    }
    if let Some(s) = seed {
        opts.seed = s;
    }
    let outcome = experiment::reproduce_fig2(&opts)?;
    println!("panel,method,tau,cross_cluster_mass,cluster_preservation,transport_cost");
    for r in &outcome.rows {
        println!(
            "{},{},{},{},{},{}",
            r.panel,
            r.method,
            fmt_num(r.tau),
            fmt_num(r.cross_cluster_mass),
            fmt_num(r.cluster_preservation),
            fmt_num(r.transport_cost)
        );
    }
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn grad_check_cmd(seed: u64) -> anyhow::Result<()> {
    let lines = experiment::gradient_suite(seed)?;
    let mut failed = 0;
    for l in &lines {
        let status = if l.passed() { "ok" } else { "FAIL" };
        println!("{}={} threshold={} {status}", l.name, fmt_num(l.error), fmt_num(l.threshold));
        failed += usize::from(!l.passed());
    }
    if failed > 0 {
        bail!("{failed} gradient checks above threshold");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Solve { source, target, tau1, tau2, epsilon_scale, epsilon_abs, max_iters, tol, out } => {
            solve_cmd(source, target, (tau1, tau2), epsilon_scale, epsilon_abs, max_iters, tol, out)
        }
        Command::Run { config } => run_cmd(config),
        Command::ReproduceFig2 { out, iterations, seed } => fig2_cmd(out, iterations, seed),
        Command::GradCheck { seed } => grad_check_cmd(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
