//! Log-domain Sinkhorn iterations for entropic optimal transport with
//! hard (balanced) or KL-penalised (unbalanced) marginals.
//!
//! For weights `a`, `b`, cost `C`, regularisation `eps` and marginal
//! penalties `lambda1`, `lambda2`, the solver minimises
//!
//! ```text
//! <P, C> + lambda1 KL(P 1 | a) + lambda2 KL(P^T 1 | b) + eps KL(P | a (x) b)
//! ```
//!
//! with the generalised KL `KL(p | q) = sum p log(p / q) - p + q`. Marginal
//! penalties are given through `tau = lambda / (lambda + eps)`; `tau = 1`
//! recovers the hard constraint. The dual potentials are updated as
//!
//! ```text
//! f_i <- tau1 * -eps log sum_j exp(log b_j + (g_j - C_ij) / eps)
//! g_j <- tau2 * -eps log sum_i exp(log a_i + (f_i - C_ij) / eps)
//! ```
//!
//! and the plan is `P_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)`. At a fixed
//! point `P 1 = a * exp(-f / lambda1)` and `P^T 1 = b * exp(-g / lambda2)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::measures::{CostMatrix, DiscreteMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Divergence {
    /// Kullback-Leibler; the only marginal divergence shipped.
    #[default]
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// `eps = epsilon_scale * mean(C)` unless `epsilon_abs` is set.
    pub epsilon_scale: f64,
    pub epsilon_abs: Option<f64>,
    pub tau1: f64,
    pub tau2: f64,
    pub max_iters: usize,
    /// Stopping tolerance, relative: potentials must move by at most
    /// `tolerance * mean(C)` per sweep and the marginal stationarity residuals
    /// must be at most `tolerance` times the corresponding input mass.
    pub tolerance: f64,
    pub divergence: Divergence,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { epsilon_scale: 0.01, epsilon_abs: None, tau1: 1.0, tau2: 1.0, max_iters: 10_000, tolerance: 1e-6, divergence: Divergence::Kl }
    }
}

impl SolverConfig {
    pub fn balanced() -> Self {
        Self::default()
    }

    pub fn unbalanced(tau: f64) -> Self {
        Self { tau1: tau, tau2: tau, ..Self::default() }
    }

    pub fn with_tau(self, tau1: f64, tau2: f64) -> Self {
        Self { tau1, tau2, ..self }
    }

    pub fn with_epsilon_abs(self, epsilon: f64) -> Self {
        Self { epsilon_abs: Some(epsilon), ..self }
    }

    pub fn with_epsilon_scale(self, scale: f64) -> Self {
        Self { epsilon_scale: scale, epsilon_abs: None, ..self }
    }

    pub fn with_tolerance(self, tolerance: f64) -> Self {
        Self { tolerance, ..self }
    }

    pub fn with_max_iters(self, max_iters: usize) -> Self {
        Self { max_iters, ..self }
    }

    pub fn is_balanced(&self) -> bool {
        self.tau1 == 1.0 && self.tau2 == 1.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::OutOfRange { name, value: tau, allowed: "(0, 1]" });
            }
        }
        if !(self.epsilon_scale > 0.0 && self.epsilon_scale.is_finite()) {
            return Err(Error::OutOfRange { name: "epsilon_scale", value: self.epsilon_scale, allowed: "> 0" });
        }
        if let Some(eps) = self.epsilon_abs {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::OutOfRange { name: "epsilon_abs", value: eps, allowed: "> 0" });
            }
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::OutOfRange { name: "tolerance", value: self.tolerance, allowed: "> 0" });
        }
        if self.max_iters == 0 {
            return Err(Error::OutOfRange { name: "max_iters", value: 0.0, allowed: ">= 1" });
        }
        Ok(())
    }

    /// Scale used to turn relative settings into cost units: `mean(C)`, or 1
    /// for an all-zero cost matrix.
    pub fn cost_scale(cost: &CostMatrix) -> f64 {
        if cost.mean() > 0.0 {
            cost.mean()
        } else {
            1.0
        }
    }

    /// Regularisation strength in cost units for a given cost matrix.
    pub fn epsilon_for(&self, cost: &CostMatrix) -> f64 {
        self.epsilon_abs.unwrap_or(self.epsilon_scale * Self::cost_scale(cost))
    }
}

/// Marginal penalty strength `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginalPenalty {
    Finite(f64),
    /// Hard marginal constraint (`tau = 1`).
    Infinite,
}

impl MarginalPenalty {
    pub fn value(self) -> f64 {
        match self {
            MarginalPenalty::Finite(v) => v,
            MarginalPenalty::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, MarginalPenalty::Infinite)
    }
}

/// Inverts `tau = lambda / (lambda + eps)`.
pub fn tau_to_lambda(tau: f64, epsilon: f64) -> Result<MarginalPenalty> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::OutOfRange { name: "tau", value: tau, allowed: "(0, 1]" });
    }
    if !(epsilon > 0.0) {
        return Err(Error::OutOfRange { name: "epsilon", value: epsilon, allowed: "> 0" });
    }
    if tau == 1.0 {
        Ok(MarginalPenalty::Infinite)
    } else {
        Ok(MarginalPenalty::Finite(epsilon * tau / (1.0 - tau)))
    }
}

/// Output of [`solve`].
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    pub source_weights: Array1<f64>,
    pub target_weights: Array1<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// `<P, C>`.
    pub transported_cost: f64,
    pub epsilon: f64,
    pub lambda1: MarginalPenalty,
    pub lambda2: MarginalPenalty,
    /// Sup-norm change of the potentials during the last sweep.
    pub potential_change: f64,
    /// Largest marginal stationarity residual at exit, in mass units.
    pub marginal_residual: f64,
    /// `KL(P | a (x) b)`.
    pub plan_kl: f64,
}

impl TransportPlan {
    pub fn total_mass(&self) -> f64 {
        self.plan.sum()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.plan.dim()
    }

    /// `<P, C> + eps KL(P | a (x) b)`; for balanced plans this is the entropic
    /// transport value.
    pub fn entropic_cost(&self) -> f64 {
        self.transported_cost + self.epsilon * self.plan_kl
    }

    /// Full primal objective including the finite marginal penalties.
    pub fn objective(&self) -> f64 {
        let mut value = self.entropic_cost();
        if let MarginalPenalty::Finite(l) = self.lambda1 {
            value += l * kl(self.row_marginal.view(), self.source_weights.view());
        }
        if let MarginalPenalty::Finite(l) = self.lambda2 {
            value += l * kl(self.col_marginal.view(), self.target_weights.view());
        }
        value
    }
}

/// Generalised KL between nonnegative vectors, `sum p log(p/q) - p + q`.
pub fn kl(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> f64 {
    p.iter().zip(q.iter()).map(|(&p, &q)| if p > 0.0 { p * (p / q).ln() - p + q } else { q }).sum()
}

/// Numerically stable `-eps * log sum_k exp(s_k)` with `s_k = h_k - c_k`.
const ANNEAL_TOLERANCE: f64 = 1e-2;

/// Row sums of the rescaled kernel below this are recomputed in log space.
const KERNEL_FLOOR: f64 = 1e-280;

/// Updates `out_i <- tau * softmin_eps(h - C_i.)` for every row of `kernel`
/// (which holds `exp(-C / eps)`) and returns the largest change.
///
/// The log-sum-exp is evaluated as `H + ln sum_j K_ij exp(h_j - H)` with
/// `H = max h`; rows where that sum underflows fall back to the exact form.
fn half_sweep(h: &[f64], kernel: &Array2<f64>, scaled: &[f64], eps: f64, tau: f64, out: &mut [f64]) -> f64 {
    let m = h.len();
    let top = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut change: f64 = 0.0;
    let sums = if top.is_finite() {
        let w = Array1::from_iter(h.iter().map(|&v| (v - top).exp()));
        Some(kernel.dot(&w))
    } else {
        None
    };
    for (i, slot) in out.iter_mut().enumerate() {
        let new = match &sums {
            Some(s) if s[i] > KERNEL_FLOOR => tau * (-eps * (top + s[i].ln())),
            _ => tau * softmin(h, &scaled[i * m..(i + 1) * m], eps),
        };
        change = change.max((new - *slot).abs());
        *slot = new;
    }
    change
}

/// Geometric eps schedule `scale, scale/2, ...` ending exactly at `eps`.
fn annealing_schedule(eps: f64, scale: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut e = scale;
    while e > 2.0 * eps {
        out.push(e);
        e *= 0.5;
    }
    out.push(eps);
    out
}

#[inline]
fn softmin(h: &[f64], scaled_cost: &[f64], eps: f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (&h, &c) in h.iter().zip(scaled_cost) {
        let s = h - c;
        if s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    let mut sum = 0.0;
    for (&h, &c) in h.iter().zip(scaled_cost) {
        sum += (h - c - max).exp();
    }
    -eps * (max + sum.ln())
}

fn check_weights(w: ArrayView1<'_, f64>, name: &str) -> Result<f64> {
    for (index, &value) in w.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::non_finite(name.to_string()));
        }
        if value < 0.0 {
            return Err(Error::NegativeWeight { index, value });
        }
    }
    let mass = w.sum();
    if mass <= 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok(mass)
}

/// Solves the entropic (unbalanced) transport problem between weights `a`
/// and `b`. Non-convergence is reported through [`TransportPlan::converged`];
/// the last iterate is returned.
pub fn solve(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, cost: &CostMatrix, cfg: &SolverConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = cost.shape();
    if a.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: a.len() });
    }
    if b.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: b.len() });
    }
    let c = cost.entries();
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("cost matrix"));
    }
    let mass_a = check_weights(a, "source weights")?;
    let mass_b = check_weights(b, "target weights")?;

    let eps = cfg.epsilon_for(cost);
    let scale = SolverConfig::cost_scale(cost);
    let lambda1 = tau_to_lambda(cfg.tau1, eps)?;
    let lambda2 = tau_to_lambda(cfg.tau2, eps)?;
    let potential_tol = cfg.tolerance * scale;

    let log_a: Vec<f64> = a.iter().map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect();
    let log_b: Vec<f64> = b.iter().map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect();

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut hf = vec![0.0; n];
    let mut hg = vec![0.0; m];

    let mut iterations = 0;
    let mut converged = false;
    let mut change = f64::INFINITY;
    let mut residual = (f64::INFINITY, f64::INFINITY);

    // Warm-started annealing: halve eps from the cost scale down to the target.
    // Intermediate stages only need a coarse fixed point.
    let schedule = annealing_schedule(eps, scale);
    let last = schedule.len() - 1;
    for (stage, &stage_eps) in schedule.iter().enumerate() {
        let final_stage = stage == last;
        let stage_tol = if final_stage { potential_tol } else { potential_tol.max(ANNEAL_TOLERANCE * stage_eps) };
        // Row-major C/eps and its transpose so both half-sweeps stream contiguously.
        let scaled: Vec<f64> = c.iter().map(|&v| v / stage_eps).collect();
        let scaled_t: Vec<f64> = c.t().iter().map(|&v| v / stage_eps).collect();
        let kernel = Array2::from_shape_vec((n, m), scaled.iter().map(|&v| (-v).exp()).collect()).expect("shape");
        let kernel_t = Array2::from_shape_vec((m, n), scaled_t.iter().map(|&v| (-v).exp()).collect()).expect("shape");
        while iterations < cfg.max_iters {
            iterations += 1;
            for j in 0..m {
                hg[j] = log_b[j] + g[j] / stage_eps;
            }
            let df = half_sweep(&hg, &kernel, &scaled, stage_eps, cfg.tau1, &mut f);
            for i in 0..n {
                hf[i] = log_a[i] + f[i] / stage_eps;
            }
            let dg = half_sweep(&hf, &kernel_t, &scaled_t, stage_eps, cfg.tau2, &mut g);
            change = df.max(dg);
            if !change.is_finite() {
                return Err(Error::non_finite("dual potentials"));
            }
            if change <= stage_tol {
                if !final_stage {
                    break;
                }
                residual = stationarity_residual(&log_a, &log_b, &f, &g, &scaled, n, m, eps, lambda1, lambda2);
                if residual.0 <= cfg.tolerance * mass_a && residual.1 <= cfg.tolerance * mass_b {
                    converged = true;
                    break;
                }
            }
        }
    }
    let scaled: Vec<f64> = c.iter().map(|&v| v / eps).collect();
    if !converged {
        residual = stationarity_residual(&log_a, &log_b, &f, &g, &scaled, n, m, eps, lambda1, lambda2);
    }

    let mut plan = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let e = log_a[i] + log_b[j] + (f[i] + g[j]) / eps - scaled[i * m + j];
            plan[[i, j]] = e.exp();
        }
    }
    let (row_marginal, col_marginal) = marginals(plan.view());
    let transported_cost = (&plan * c).sum();
    let mut plan_kl = mass_a * mass_b - plan.sum();
    for i in 0..n {
        for j in 0..m {
            let p = plan[[i, j]];
            if p > 0.0 {
                plan_kl += p * ((f[i] + g[j]) / eps - scaled[i * m + j]);
            }
        }
    }

    Ok(TransportPlan {
        plan,
        f: Array1::from_vec(f),
        g: Array1::from_vec(g),
        row_marginal,
        col_marginal,
        source_weights: a.to_owned(),
        target_weights: b.to_owned(),
        iterations_used: iterations,
        converged,
        transported_cost,
        epsilon: eps,
        lambda1,
        lambda2,
        potential_change: change,
        marginal_residual: residual.0.max(residual.1),
        plan_kl,
    })
}

/// Sup-norm residuals of `P 1 = a exp(-f/lambda1)` and `P^T 1 = b exp(-g/lambda2)`.
#[allow(clippy::too_many_arguments)]
fn stationarity_residual(
    log_a: &[f64],
    log_b: &[f64],
    f: &[f64],
    g: &[f64],
    scaled: &[f64],
    n: usize,
    m: usize,
    eps: f64,
    lambda1: MarginalPenalty,
    lambda2: MarginalPenalty,
) -> (f64, f64) {
    let mut rows = vec![0.0; n];
    let mut cols = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let p = (log_a[i] + log_b[j] + (f[i] + g[j]) / eps - scaled[i * m + j]).exp();
            rows[i] += p;
            cols[j] += p;
        }
    }
    let target = |log_w: f64, pot: f64, lambda: MarginalPenalty| match lambda {
        MarginalPenalty::Infinite => log_w.exp(),
        MarginalPenalty::Finite(l) => (log_w - pot / l).exp(),
    };
    let r = (0..n).map(|i| (rows[i] - target(log_a[i], f[i], lambda1)).abs()).fold(0.0, f64::max);
    let c = (0..m).map(|j| (cols[j] - target(log_b[j], g[j], lambda2)).abs()).fold(0.0, f64::max);
    (r, c)
}

/// Convenience wrapper: squared Euclidean cost between two measures.
pub fn solve_measures(src: &DiscreteMeasure, tgt: &DiscreteMeasure, cfg: &SolverConfig) -> Result<TransportPlan> {
    let cost = CostMatrix::sq_euclidean(src.points(), tgt.points())?;
    solve(src.weights().view(), tgt.weights().view(), &cost, cfg)
}

/// Row and column sums of a plan.
pub fn marginals(plan: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    (plan.sum_axis(Axis(1)), plan.sum_axis(Axis(0)))
}

/// `<P, C>`.
pub fn plan_cost(plan: ArrayView2<'_, f64>, cost: &CostMatrix) -> Result<f64> {
    if plan.dim() != cost.shape() {
        return Err(Error::DimensionMismatch { expected: cost.shape().0 * cost.shape().1, got: plan.len() });
    }
    Ok(plan.iter().zip(cost.entries().iter()).map(|(p, c)| p * c).sum())
}

/// Debiased Sinkhorn divergence with its three balanced sub-problems.
#[derive(Debug, Clone)]
pub struct SinkhornDivergence {
    pub value: f64,
    pub converged: bool,
    /// Shared regularisation, fixed from the cross cost matrix.
    pub epsilon: f64,
    pub cross: TransportPlan,
    pub source_self: TransportPlan,
    pub target_self: TransportPlan,
}

/// `S(alpha, beta) = W(alpha, beta) - W(alpha, alpha)/2 - W(beta, beta)/2`, each
/// `W` the converged balanced entropic value `<P, C> + eps KL(P | a (x) b)`.
///
/// Marginal penalties in `cfg` are ignored; the three problems share the
/// `eps` derived from the cross cost matrix.
pub fn sinkhorn_divergence(alpha: &DiscreteMeasure, beta: &DiscreteMeasure, cfg: &SolverConfig) -> Result<SinkhornDivergence> {
    if !alpha.is_normalized() || !beta.is_normalized() {
        return Err(Error::OutOfRange {
            name: "total mass",
            value: if alpha.is_normalized() { beta.total_mass() } else { alpha.total_mass() },
            allowed: "1 (normalized measures)",
        });
    }
    let cross_cost = CostMatrix::sq_euclidean(alpha.points(), beta.points())?;
    let eps = cfg.epsilon_for(&cross_cost);
    let balanced = SolverConfig { tau1: 1.0, tau2: 1.0, epsilon_abs: Some(eps), ..*cfg };
    // Tolerances of the self terms stay in the cross problem's cost units.
    let tol_units = cfg.tolerance * SolverConfig::cost_scale(&cross_cost);
    let self_cfg = |c: &CostMatrix| SolverConfig { tolerance: tol_units / SolverConfig::cost_scale(c), ..balanced };

    let cross = solve(alpha.weights().view(), beta.weights().view(), &cross_cost, &balanced)?;
    let aa = CostMatrix::sq_euclidean(alpha.points(), alpha.points())?;
    let source_self = solve(alpha.weights().view(), alpha.weights().view(), &aa, &self_cfg(&aa))?;
    let bb = CostMatrix::sq_euclidean(beta.points(), beta.points())?;
    let target_self = solve(beta.weights().view(), beta.weights().view(), &bb, &self_cfg(&bb))?;

    let value = cross.entropic_cost() - 0.5 * source_self.entropic_cost() - 0.5 * target_self.entropic_cost();
    Ok(SinkhornDivergence {
        value,
        converged: cross.converged && source_self.converged && target_self.converged,
        epsilon: eps,
        cross,
        source_self,
        target_self,
    })
}
