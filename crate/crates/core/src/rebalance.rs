//! Rebalancing through an unbalanced coupling.
//!
//! Solving unbalanced OT between two batches yields a plan whose marginals are
//! reweighted versions of the inputs with equal mass. Sampling index pairs
//! from the normalised plan produces batches from those reweighted measures,
//! which any balanced Monge map estimator can then consume. The marginals also
//! give pointwise estimates of the reweighting functions, `u(x_i) ~ n a_i` and
//! `v(y_j) ~ m b_j`, that can be regressed by small networks.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::error::{Error, Result};
use crate::measures::{CostMatrix, DiscreteMeasure};
use crate::neural::{mse_loss_and_grad, Activation, AdamConfig, AdamState, Mlp, OutputHead};
use crate::rng::Rng;
use crate::solver::{self, MarginalPenalty, SolverConfig, TransportPlan};

/// Index pairs drawn from a normalised plan.
#[derive(Debug, Clone, PartialEq)]
pub struct RebalancedBatch {
    pub pairs: Vec<(usize, usize)>,
    /// Multiplicity of every distinct pair.
    pub counts: BTreeMap<(usize, usize), usize>,
    /// Total mass of the plan before normalisation.
    pub plan_mass: f64,
}

impl RebalancedBatch {
    pub fn source_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn target_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    /// Gathers the paired points `(x~, y~)` from the row and column point sets.
    pub fn gather(&self, sources: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        (sources.select(Axis(0), &self.source_indices()), targets.select(Axis(0), &self.target_indices()))
    }
}

/// Draws `k` index pairs i.i.d. with replacement from `P / sum(P)`.
pub fn resample_pairs(plan: &TransportPlan, k: usize, rng: &mut Rng) -> Result<RebalancedBatch> {
    resample_from_matrix(plan.plan.view(), k, rng)
}

pub fn resample_from_matrix(plan: ArrayView2<'_, f64>, k: usize, rng: &mut Rng) -> Result<RebalancedBatch> {
    let mass = plan.sum();
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::ZeroMass);
    }
    let m = plan.ncols();
    let weights: Vec<f64> = plan.iter().map(|&p| p / mass).collect();
    let dist = WeightedIndex::new(&weights).map_err(|_| Error::ZeroMass)?;
    let mut pairs = Vec::with_capacity(k);
    let mut counts = BTreeMap::new();
    for _ in 0..k {
        let flat = dist.sample(rng);
        let pair = (flat / m, flat % m);
        pairs.push(pair);
        *counts.entry(pair).or_insert(0) += 1;
    }
    Ok(RebalancedBatch { pairs, counts, plan_mass: mass })
}

/// Pointwise reweighting estimates read off a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightEstimate {
    /// `n * (P 1)_i`.
    pub u_hat: Array1<f64>,
    /// `m * (P^T 1)_j`.
    pub v_hat: Array1<f64>,
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

/// `u_hat = n P 1`, `v_hat = m P^T 1`, for a plan between uniformly weighted batches.
pub fn reweight_estimates(plan: &TransportPlan) -> ReweightEstimate {
    let (n, m) = plan.shape();
    let (rows, cols) = solver::marginals(plan.plan.view());
    ReweightEstimate { u_hat: rows * n as f64, v_hat: cols * m as f64, source_indices: (0..n).collect(), target_indices: (0..m).collect() }
}

/// Training settings for reweighting regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightTrainConfig {
    pub steps: usize,
    pub adam: AdamConfig,
}

impl Default for ReweightTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, adam: AdamConfig { learning_rate: 3e-3, ..AdamConfig::default() } }
    }
}

/// A network fitted to reweighting values together with its loss curve.
#[derive(Debug, Clone)]
pub struct FittedReweighting {
    pub net: Mlp,
    pub loss_history: Vec<f64>,
}

/// A scalar network with a softplus head, suitable for `u_theta` / `v_theta`.
pub fn reweighting_net(dim: usize, hidden: &[usize], seed: u64) -> Result<Mlp> {
    let mut sizes = vec![dim];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    Mlp::new(&sizes, Activation::Silu, OutputHead::Softplus, seed)
}

/// Regresses `net` onto reweighting values by mean squared error, cycling
/// through `batches` for `cfg.steps` Adam steps.
pub fn fit_reweighting(mut net: Mlp, batches: &[(Array2<f64>, Array1<f64>)], cfg: &ReweightTrainConfig) -> Result<FittedReweighting> {
    if batches.is_empty() || batches.iter().all(|(_, y)| y.is_empty()) {
        return Err(Error::NoData);
    }
    if net.output_dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: net.output_dim() });
    }
    let mut adam = AdamState::new(net.param_count(), cfg.adam);
    let mut loss_history = Vec::with_capacity(cfg.steps);
    let usable: Vec<_> = batches.iter().filter(|(_, y)| !y.is_empty()).collect();
    for step in 0..cfg.steps {
        let (x, y) = usable[step % usable.len()];
        let (loss, grad) = mse_loss_and_grad(&net, x.view(), y.view())?;
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("reweighting loss at step {step}")));
        }
        adam.step(net.params_mut(), &grad)?;
        loss_history.push(loss);
    }
    Ok(FittedReweighting { net, loss_history })
}

/// Online learner for the `learn_rescaling` branch: one Adam step on each of
/// `u_theta` and `v_theta` per coupling.
#[derive(Debug, Clone)]
pub struct RescalingLearner {
    pub u: Mlp,
    pub v: Mlp,
    adam_u: AdamState,
    adam_v: AdamState,
}

impl RescalingLearner {
    pub fn new(dim: usize, hidden: &[usize], adam: AdamConfig, seed: u64) -> Result<Self> {
        let u = reweighting_net(dim, hidden, seed.wrapping_add(101))?;
        let v = reweighting_net(dim, hidden, seed.wrapping_add(202))?;
        let (pu, pv) = (u.param_count(), v.param_count());
        Ok(Self { u, v, adam_u: AdamState::new(pu, adam), adam_v: AdamState::new(pv, adam) })
    }

    /// Returns the two regression losses before the update.
    pub fn step(&mut self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, est: &ReweightEstimate) -> Result<(f64, f64)> {
        let (lu, gu) = mse_loss_and_grad(&self.u, x, est.u_hat.view())?;
        let (lv, gv) = mse_loss_and_grad(&self.v, y, est.v_hat.view())?;
        if !(lu.is_finite() && lv.is_finite()) {
            return Err(Error::non_finite("rescaling loss"));
        }
        self.adam_u.step(self.u.params_mut(), &gu)?;
        self.adam_v.step(self.v.params_mut(), &gv)?;
        Ok((lu, lv))
    }
}

/// Numerical check that an unbalanced plan is the balanced plan between its
/// own marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct RebalancingReport {
    /// `||P_uot - P_bal||_F`.
    pub frobenius_gap: f64,
    /// `frobenius_gap / ||P_uot||_F`.
    pub relative_frobenius_gap: f64,
    /// `|<P_uot, C> - <P_bal, C>|`.
    pub cost_gap: f64,
    /// Largest relative residual of `P 1 = a exp(-f/lambda1)` and
    /// `P^T 1 = b exp(-g/lambda2)` over the finite penalties.
    pub reweighting_residual: f64,
    pub uot_mass: f64,
    pub uot_converged: bool,
    pub balanced_converged: bool,
    pub uot_iterations: usize,
    pub balanced_iterations: usize,
}

impl RebalancingReport {
    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("frobenius_gap", crate::io::fmt_num(self.frobenius_gap)),
            ("relative_frobenius_gap", crate::io::fmt_num(self.relative_frobenius_gap)),
            ("cost_gap", crate::io::fmt_num(self.cost_gap)),
            ("reweighting_residual", crate::io::fmt_num(self.reweighting_residual)),
            ("uot_mass", crate::io::fmt_num(self.uot_mass)),
            ("uot_converged", self.uot_converged.to_string()),
            ("balanced_converged", self.balanced_converged.to_string()),
            ("uot_iterations", self.uot_iterations.to_string()),
            ("balanced_iterations", self.balanced_iterations.to_string()),
        ]
    }
}

/// Relative residual of the marginal reweighting identity on both sides.
pub fn reweighting_residual(plan: &TransportPlan) -> f64 {
    let side = |marg: ArrayView1<'_, f64>, w: ArrayView1<'_, f64>, pot: ArrayView1<'_, f64>, lambda: MarginalPenalty| {
        let MarginalPenalty::Finite(l) = lambda else { return 0.0 };
        marg.iter()
            .zip(w.iter().zip(pot.iter()))
            .filter(|(_, (&w, _))| w > 0.0)
            .map(|(&m, (&w, &p))| {
                let expected = w * (-p / l).exp();
                (m - expected).abs() / expected
            })
            .fold(0.0, f64::max)
    };
    side(plan.row_marginal.view(), plan.source_weights.view(), plan.f.view(), plan.lambda1).max(side(
        plan.col_marginal.view(),
        plan.target_weights.view(),
        plan.g.view(),
        plan.lambda2,
    ))
}

/// Solves UOT between `mu` and `nu`, then balanced OT between the resulting
/// marginals at the same `eps`, and compares the two plans.
pub fn verify_rebalancing(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cfg: &SolverConfig) -> Result<RebalancingReport> {
    let cost = CostMatrix::sq_euclidean(mu.points(), nu.points())?;
    let uot = solver::solve(mu.weights().view(), nu.weights().view(), &cost, cfg)?;
    let balanced_cfg = SolverConfig { tau1: 1.0, tau2: 1.0, epsilon_abs: Some(uot.epsilon), ..*cfg };
    let bal = solver::solve(uot.row_marginal.view(), uot.col_marginal.view(), &cost, &balanced_cfg)?;
    let diff = &uot.plan - &bal.plan;
    let frobenius_gap = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm = uot.plan.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(RebalancingReport {
        frobenius_gap,
        relative_frobenius_gap: frobenius_gap / norm,
        cost_gap: (uot.transported_cost - bal.transported_cost).abs(),
        reweighting_residual: reweighting_residual(&uot),
        uot_mass: uot.total_mass(),
        uot_converged: uot.converged,
        balanced_converged: bal.converged,
        uot_iterations: uot.iterations_used,
        balanced_iterations: bal.iterations_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    fn plan_from(p: Array2<f64>) -> TransportPlan {
        let (n, m) = p.dim();
        let (r, c) = solver::marginals(p.view());
        TransportPlan {
            plan: p,
            f: Array1::zeros(n),
            g: Array1::zeros(m),
            row_marginal: r,
            col_marginal: c,
            source_weights: Array1::from_elem(n, 1.0 / n as f64),
            target_weights: Array1::from_elem(m, 1.0 / m as f64),
            iterations_used: 0,
            converged: true,
            transported_cost: 0.0,
            epsilon: 1.0,
            lambda1: MarginalPenalty::Infinite,
            lambda2: MarginalPenalty::Infinite,
            potential_change: 0.0,
            marginal_residual: 0.0,
            plan_kl: 0.0,
        }
    }

    #[test]
    fn degenerate_plan_resamples_single_pair() {
        let p = plan_from(array![[0.0, 0.7], [0.0, 0.0]]);
        let mut r = rng::seeded(0, 0);
        let batch = resample_pairs(&p, 50, &mut r).unwrap();
        assert!(batch.pairs.iter().all(|&pair| pair == (0, 1)));
        assert_eq!(batch.counts[&(0, 1)], 50);
        assert!((batch.plan_mass - 0.7).abs() < 1e-15);
    }

    #[test]
    fn resampling_stays_in_support() {
        let p = plan_from(array![[0.5, 0.0], [0.0, 0.5]]);
        let mut r = rng::seeded(1, 0);
        let batch = resample_pairs(&p, 4, &mut r).unwrap();
        assert_eq!(batch.pairs.len(), 4);
        assert!(batch.pairs.iter().all(|&(i, j)| i == j));
    }

    #[test]
    fn uniform_plan_frequencies_within_binomial_band() {
        // p = 1/4, k = 10 000: sigma = sqrt(p(1-p)/k) = 0.0043301, so the
        // 5-sigma band is [0.228349, 0.271651], inside [0.22, 0.28].
        let k = 10_000;
        let p = 0.25_f64;
        let sigma = (p * (1.0 - p) / k as f64).sqrt();
        let (lo, hi) = (p - 5.0 * sigma, p + 5.0 * sigma);
        assert!(lo > 0.22 && hi < 0.28);
        let plan = plan_from(Array2::from_elem((2, 2), 0.25));
        let batch = resample_pairs(&plan, k, &mut rng::seeded(2, 0)).unwrap();
        for c in batch.counts.values() {
            let freq = *c as f64 / k as f64;
            assert!(freq >= lo && freq <= hi, "{freq}");
        }
    }

    #[test]
    fn zero_mass_plan_is_rejected() {
        let plan = plan_from(Array2::zeros((2, 2)));
        assert!(matches!(resample_pairs(&plan, 3, &mut rng::seeded(0, 0)), Err(Error::ZeroMass)));
    }

    #[test]
    fn reweight_examples() {
        let est = reweight_estimates(&plan_from(array![[0.5, 0.0], [0.0, 0.5]]));
        assert_eq!(est.u_hat.to_vec(), vec![1.0, 1.0]);
        let est = reweight_estimates(&plan_from(array![[0.1, 0.2], [0.3, 0.4]]));
        assert!((est.u_hat[0] - 0.6).abs() < 1e-12 && (est.u_hat[1] - 1.4).abs() < 1e-12);
        assert!((est.v_hat[0] - 0.8).abs() < 1e-12 && (est.v_hat[1] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn fit_reweighting_requires_data() {
        let net = reweighting_net(2, &[8], 0).unwrap();
        assert!(matches!(fit_reweighting(net, &[], &ReweightTrainConfig::default()), Err(Error::NoData)));
    }

    #[test]
    fn balanced_rebalancing_is_trivial() {
        let mu = crate::measures::make_measure(vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![2.0, -1.0]], None).unwrap();
        let nu = crate::measures::make_measure(vec![vec![0.5, 1.0], vec![1.5, 0.0], vec![-1.0, 0.0]], None).unwrap();
        let report = verify_rebalancing(&mu, &nu, &SolverConfig::default().with_tolerance(1e-12)).unwrap();
        assert!(report.frobenius_gap <= 1e-10, "{report:?}");
        assert_eq!(report.reweighting_residual, 0.0);
    }
}
