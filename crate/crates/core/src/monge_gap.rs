//! Monge-gap regularised map estimation, balanced (OT-MG) or on rebalanced
//! batches (UOT-MG).
//!
//! The loss of a map `T` on a batch is
//! `w_fit * S_eps(T#x, y) + w_gap * M(x, T(x))` where `S_eps` is the Sinkhorn
//! divergence and `M(x, T(x)) = 1/n sum c(x_i, T(x_i)) - W_eps(x, T(x))` is the
//! Monge gap with the converged entropic cost
//! `W_eps = <P, C> + eps KL(P | a x b)` in place of the exact OT cost. Both
//! terms are optimal values, so holding the plans fixed gives their gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::flow_matching::sample_indices;
use crate::measures::{CostMatrix, DiscreteMeasure};
use crate::neural::{Activation, AdamConfig, AdamState, ForwardCache, Mlp, OutputHead};
use crate::rebalance;
use crate::rng::{self, Rng};
use crate::solver::{self, SolverConfig, TransportPlan};

/// A map `T(x) = x + net(x)`. A zero network is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub net: Mlp,
}

impl PointMap {
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut sizes = vec![dim];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        Ok(Self { net: Mlp::new(&sizes, Activation::Silu, OutputHead::Linear, seed)? })
    }

    pub fn identity(dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut sizes = vec![dim];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        Ok(Self { net: Mlp::zeros(&sizes, Activation::Silu, OutputHead::Linear)? })
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(&x + &self.net.forward_batch(x)?)
    }

    fn apply_with_cache(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        let cache = self.net.forward_with_cache(x)?;
        Ok((&x + cache.output(), cache))
    }
}

/// Value of the Monge gap on one batch with its diagnostics.
#[derive(Debug, Clone)]
pub struct MongeGap {
    pub value: f64,
    /// `1/n sum c(x_i, T(x_i))`.
    pub mean_cost: f64,
    /// Entropic cost `W_eps(x, T(x))` of the balanced plan.
    pub entropic_cost: f64,
    /// `<P_eps, C>` alone.
    pub transported_cost: f64,
    /// `eps ln n`: the entropic cost exceeds the exact one by at most this much,
    /// so the value is at least `-bias_bound`.
    pub bias_bound: f64,
    pub epsilon: f64,
    pub converged: bool,
    pub plan: TransportPlan,
}

fn uniform(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

fn check_pair(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, same_count: bool) -> Result<()> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::Empty("batch"));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch { expected: x.ncols(), got: y.ncols() });
    }
    if same_count && x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), got: y.nrows() });
    }
    Ok(())
}

/// Monge gap of the map `x_i -> mapped_i` under squared Euclidean cost. The
/// solver configuration is used with both taus forced to 1.
pub fn monge_gap(points: ArrayView2<'_, f64>, mapped: ArrayView2<'_, f64>, cfg: &SolverConfig) -> Result<MongeGap> {
    check_pair(points, mapped, true)?;
    let n = points.nrows();
    let cost = CostMatrix::sq_euclidean(points, mapped)?;
    let mean_cost = cost.entries().diag().sum() / n as f64;
    let w = uniform(n);
    let plan = solver::solve(w.view(), w.view(), &cost, &cfg.with_tau(1.0, 1.0))?;
    if !plan.converged {
        log::debug!("Monge gap plan stopped after {} sweeps without converging", plan.iterations_used);
    }
    let entropic_cost = plan.entropic_cost();
    Ok(MongeGap {
        value: mean_cost - entropic_cost,
        mean_cost,
        entropic_cost,
        transported_cost: plan.transported_cost,
        bias_bound: plan.epsilon * (n as f64).ln(),
        epsilon: plan.epsilon,
        converged: plan.converged,
        plan,
    })
}

/// Envelope gradient of the Monge gap with respect to the mapped points,
/// holding the plan fixed. `eps_scale` is set when eps is relative to the
/// mean cost and thus moves with the mapped points.
fn monge_gap_grad(points: ArrayView2<'_, f64>, mapped: ArrayView2<'_, f64>, plan: &TransportPlan, eps_scale: Option<f64>) -> Array2<f64> {
    let n = points.nrows() as f64;
    let mut grad = (&mapped - &points) * (2.0 / n);
    let p = &plan.plan;
    let col_mass = p.sum_axis(Axis(0));
    // sum_k P_ki 2 (y_i - x_k) = 2 (colmass_i y_i - (P^T x)_i)
    let ptx = p.t().dot(&points);
    for (i, mut row) in grad.outer_iter_mut().enumerate() {
        for k in 0..row.len() {
            row[k] -= 2.0 * (col_mass[i] * mapped[[i, k]] - ptx[[i, k]]);
        }
    }
    // dW/deps = KL(P), deps/dy_i = scale * 2/n (y_i - mean(x)).
    if let Some(scale) = eps_scale {
        let x_mean = points.mean_axis(Axis(0)).expect("nonempty");
        let coef = plan.plan_kl * scale * 2.0 / n;
        for (i, mut row) in grad.outer_iter_mut().enumerate() {
            for k in 0..row.len() {
                row[k] -= coef * (mapped[[i, k]] - x_mean[k]);
            }
        }
    }
    grad
}

/// Sinkhorn divergence between two uniform point clouds and its gradient with
/// respect to the first cloud.
#[derive(Debug, Clone)]
pub struct DivergenceWithGrad {
    pub value: f64,
    pub grad: Array2<f64>,
    pub converged: bool,
}

/// `S_eps(y, z)` and `dS/dy`. Plans are held fixed (envelope rule); when eps is
/// relative to the cross cost the dependence of eps on `y` is included.
pub fn sinkhorn_divergence_grad(y: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>, cfg: &SolverConfig) -> Result<DivergenceWithGrad> {
    check_pair(y, z, false)?;
    let alpha = DiscreteMeasure::uniform(y.to_owned())?;
    let beta = DiscreteMeasure::uniform(z.to_owned())?;
    let div = solver::sinkhorn_divergence(&alpha, &beta, cfg)?;
    let n = y.nrows();

    // Cross term: sum_j P_ij 2 (y_i - z_j).
    let p = &div.cross.plan;
    let row_mass = p.sum_axis(Axis(1));
    let pz = p.dot(&z);
    let mut grad = Array2::zeros(y.dim());
    for i in 0..n {
        for k in 0..y.ncols() {
            grad[[i, k]] = 2.0 * (row_mass[i] * y[[i, k]] - pz[[i, k]]);
        }
    }
    // Self term: C_kl = |y_k - y_l|^2 contributes through both indices.
    let q = &div.source_self.plan;
    let sym = q + &q.t();
    let sym_mass = sym.sum_axis(Axis(1));
    let sy = sym.dot(&y);
    for i in 0..n {
        for k in 0..y.ncols() {
            grad[[i, k]] -= 0.5 * 2.0 * (sym_mass[i] * y[[i, k]] - sy[[i, k]]);
        }
    }
    // dS/deps * deps/dy with eps = scale * mean(C_xy).
    if cfg.epsilon_abs.is_none() {
        let cross_cost = CostMatrix::sq_euclidean(y, z)?;
        if cross_cost.mean() > 0.0 {
            let ds_deps = div.cross.plan_kl - 0.5 * div.source_self.plan_kl - 0.5 * div.target_self.plan_kl;
            let z_mean = z.mean_axis(Axis(0)).expect("nonempty");
            let coef = ds_deps * cfg.epsilon_scale * 2.0 / n as f64;
            for i in 0..n {
                for k in 0..y.ncols() {
                    grad[[i, k]] += coef * (y[[i, k]] - z_mean[k]);
                }
            }
        }
    }
    Ok(DivergenceWithGrad { value: div.value, grad, converged: div.converged })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MgCoupling {
    /// Raw batches are fed to the loss.
    Balanced,
    /// Batches are replaced by pairs resampled from an unbalanced coupling.
    Unbalanced,
}

impl MgCoupling {
    pub fn name(self) -> &'static str {
        match self {
            MgCoupling::Balanced => "balanced",
            MgCoupling::Unbalanced => "unbalanced",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgTrainConfig {
    /// Solver for the Sinkhorn divergence fitting term (taus ignored).
    pub fitting: SolverConfig,
    /// Solver for the Monge gap (taus ignored).
    pub gap: SolverConfig,
    pub fitting_weight: f64,
    pub gap_weight: f64,
    pub coupling_mode: MgCoupling,
    /// Unbalanced solver used for rebalancing batches.
    pub rebalance: SolverConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub adam: AdamConfig,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for MgTrainConfig {
    fn default() -> Self {
        Self {
            fitting: SolverConfig::default(),
            gap: SolverConfig::default(),
            fitting_weight: 1.0,
            gap_weight: 1.0,
            coupling_mode: MgCoupling::Balanced,
            rebalance: SolverConfig::unbalanced(0.9),
            batch_size: 64,
            iterations: 1000,
            adam: AdamConfig::default(),
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl MgTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("fitting_weight", self.fitting_weight), ("gap_weight", self.gap_weight)] {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::OutOfRange { name, value: w, allowed: "> 0" });
            }
        }
        if self.batch_size < 2 {
            return Err(Error::OutOfRange { name: "batch_size", value: self.batch_size as f64, allowed: ">= 2" });
        }
        self.fitting.with_tau(1.0, 1.0).validate()?;
        self.gap.with_tau(1.0, 1.0).validate()?;
        self.rebalance.validate()
    }
}

/// Loss value, its two terms and the gradient with respect to the mapped points.
#[derive(Debug, Clone)]
pub struct MgPointLoss {
    pub loss: f64,
    pub fitting: f64,
    pub gap: f64,
    pub grad: Array2<f64>,
    pub converged: bool,
}

/// Loss and envelope gradient with respect to the mapped points `T(x)`.
pub fn mg_point_loss(points: ArrayView2<'_, f64>, mapped: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, cfg: &MgTrainConfig) -> Result<MgPointLoss> {
    check_pair(points, mapped, true)?;
    check_pair(mapped, targets, false)?;
    let fit = sinkhorn_divergence_grad(mapped, targets, &cfg.fitting)?;
    let gap = monge_gap(points, mapped, &cfg.gap)?;
    let relative = cfg.gap.epsilon_abs.is_none() && CostMatrix::sq_euclidean(points, mapped)?.mean() > 0.0;
    let gap_grad = monge_gap_grad(points, mapped, &gap.plan, relative.then_some(cfg.gap.epsilon_scale));
    let loss = cfg.fitting_weight * fit.value + cfg.gap_weight * gap.value;
    if !loss.is_finite() {
        return Err(Error::non_finite("Monge gap loss"));
    }
    let grad = fit.grad * cfg.fitting_weight + gap_grad * cfg.gap_weight;
    Ok(MgPointLoss { loss, fitting: fit.value, gap: gap.value, grad, converged: fit.converged && gap.converged })
}

/// Loss of `map` on a source / target batch pair and its parameter gradient.
pub fn mg_loss_and_grad(map: &PointMap, source: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, cfg: &MgTrainConfig) -> Result<(MgPointLoss, Vec<f64>)> {
    let (mapped, cache) = map.apply_with_cache(source)?;
    let point = mg_point_loss(source, mapped.view(), target, cfg)?;
    let grads = map.net.backward_batch(&cache, point.grad.view())?;
    Ok((point, grads.params))
}

/// A trained map with its loss curve.
#[derive(Debug, Clone)]
pub struct TrainedMap {
    pub map: PointMap,
    pub loss_history: Vec<f64>,
    /// Number of batches whose rebalancing solve failed and were used raw.
    pub fallbacks: usize,
}

/// Draws one source / target batch and, in unbalanced mode, rebalances it.
pub fn make_mg_batch(source: &DiscreteMeasure, target: &DiscreteMeasure, cfg: &MgTrainConfig, rng: &mut Rng) -> Result<(Array2<f64>, Array2<f64>, bool)> {
    let xi = sample_indices(source, cfg.batch_size, rng)?;
    let yi = sample_indices(target, cfg.batch_size, rng)?;
    let x = source.points().select(Axis(0), &xi);
    let y = target.points().select(Axis(0), &yi);
    if cfg.coupling_mode == MgCoupling::Balanced {
        return Ok((x, y, false));
    }
    let rebalanced = (|| {
        let cost = CostMatrix::sq_euclidean(x.view(), y.view())?;
        let w = uniform(cfg.batch_size);
        let plan = solver::solve(w.view(), w.view(), &cost, &cfg.rebalance)?;
        let pairs = rebalance::resample_pairs(&plan, cfg.batch_size, rng)?;
        Ok::<_, Error>(pairs.gather(x.view(), y.view()))
    })();
    match rebalanced {
        Ok((xs, ys)) => Ok((xs, ys, false)),
        Err(e) => {
            log::warn!("batch rebalancing failed ({e}); using the raw batch");
            Ok((x, y, true))
        }
    }
}

/// Trains a residual map with the Monge gap loss.
pub fn train_mg(source: &DiscreteMeasure, target: &DiscreteMeasure, cfg: &MgTrainConfig) -> Result<TrainedMap> {
    cfg.validate()?;
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch { expected: source.dim(), got: target.dim() });
    }
    let mut map = PointMap::new(source.dim(), &cfg.hidden, cfg.seed)?;
    let mut adam = AdamState::new(map.net.param_count(), cfg.adam);
    let mut rng = rng::seeded(cfg.seed, rng::stream::TRAIN);
    let mut loss_history = Vec::with_capacity(cfg.iterations);
    let mut fallbacks = 0;
    for iteration in 0..cfg.iterations {
        let (x, y, fell_back) = make_mg_batch(source, target, cfg, &mut rng)?;
        fallbacks += usize::from(fell_back);
        let (point, grad) = match mg_loss_and_grad(&map, x.view(), y.view(), cfg) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { iteration, checkpoint: Box::new(map.net) }),
            Err(e) => return Err(e),
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration, checkpoint: Box::new(map.net) });
        }
        adam.step(map.net.params_mut(), &grad)?;
        loss_history.push(point.loss);
    }
    Ok(TrainedMap { map, loss_history, fallbacks })
}

/// Norm-wise relative error `|g - g_fd| / |g_fd|` between the envelope
/// gradient of the loss with respect to the mapped points and central finite
/// differences of the loss, re-solving every inner plan per perturbation.
pub fn point_gradient_error(
    points: ArrayView2<'_, f64>,
    mapped: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    cfg: &MgTrainConfig,
    step: f64,
) -> Result<f64> {
    let analytic = mg_point_loss(points, mapped, targets, cfg)?.grad;
    let mut numeric = Array2::zeros(mapped.dim());
    let mut probe = mapped.to_owned();
    for i in 0..mapped.nrows() {
        for k in 0..mapped.ncols() {
            let orig = probe[[i, k]];
            probe[[i, k]] = orig + step;
            let plus = mg_point_loss(points, probe.view(), targets, cfg)?.loss;
            probe[[i, k]] = orig - step;
            let minus = mg_point_loss(points, probe.view(), targets, cfg)?.loss;
            probe[[i, k]] = orig;
            numeric[[i, k]] = (plus - minus) / (2.0 * step);
        }
    }
    let err = (&analytic - &numeric).iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(err / norm.max(f64::MIN_POSITIVE))
}
