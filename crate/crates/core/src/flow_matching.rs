//! Flow matching with independent, balanced-OT or unbalanced-OT minibatch
//! couplings, and fixed-step integration of the learned velocity field.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::measures::{CostMatrix, DiscreteMeasure};
use crate::neural::{with_time, Activation, AdamConfig, AdamState, Mlp, OutputHead};
use crate::rebalance;
use crate::rng::{self, Rng};
use crate::solver::{self, SolverConfig};

/// One training sample of the conditional flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub target_velocity: Vec<f64>,
}

/// A batch of flow samples stored column-wise: one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch {
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub t: Array1<f64>,
    pub x_t: Array2<f64>,
}

impl FlowBatch {
    /// Builds a batch on the straight path `x_t = (1 - t) x0 + t x1 + sigma xi`.
    pub fn new(x0: Array2<f64>, x1: Array2<f64>, t: Array1<f64>, noise: Option<(f64, &Array2<f64>)>) -> Result<Self> {
        if x0.dim() != x1.dim() {
            return Err(Error::DimensionMismatch { expected: x0.len(), got: x1.len() });
        }
        if t.len() != x0.nrows() {
            return Err(Error::DimensionMismatch { expected: x0.nrows(), got: t.len() });
        }
        let tcol = t.view().insert_axis(Axis(1));
        let mut x_t = &x0 * &(1.0 - &tcol) + &x1 * &tcol;
        if let Some((sigma, xi)) = noise {
            x_t.scaled_add(sigma, xi);
        }
        Ok(Self { x0, x1, t, x_t })
    }

    pub fn from_samples(samples: &[FlowSample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("flow samples"))?;
        let (n, d) = (samples.len(), first.x0.len());
        let mut batch = Self { x0: Array2::zeros((n, d)), x1: Array2::zeros((n, d)), t: Array1::zeros(n), x_t: Array2::zeros((n, d)) };
        for (i, s) in samples.iter().enumerate() {
            if s.x0.len() != d || s.x1.len() != d || s.x_t.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: s.x0.len() });
            }
            batch.x0.row_mut(i).assign(&ndarray::aview1(&s.x0));
            batch.x1.row_mut(i).assign(&ndarray::aview1(&s.x1));
            batch.x_t.row_mut(i).assign(&ndarray::aview1(&s.x_t));
            batch.t[i] = s.t;
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn target_velocity(&self) -> Array2<f64> {
        &self.x1 - &self.x0
    }

    pub fn sample(&self, i: usize) -> FlowSample {
        FlowSample {
            x0: self.x0.row(i).to_vec(),
            x1: self.x1.row(i).to_vec(),
            t: self.t[i],
            x_t: self.x_t.row(i).to_vec(),
            target_velocity: (&self.x1.row(i) - &self.x0.row(i)).to_vec(),
        }
    }
}

/// FM loss `1/B sum ||v(t, x_t) - (x1 - x0)||^2` and its parameter gradient.
pub fn fm_loss_and_grad(net: &Mlp, batch: &FlowBatch) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("flow batch"));
    }
    let inputs = with_time(batch.x_t.view(), batch.t.view());
    let cache = net.forward_with_cache(inputs.view())?;
    let residual = cache.output() - &batch.target_velocity();
    let b = batch.len() as f64;
    let loss = residual.iter().map(|r| r * r).sum::<f64>() / b;
    if !loss.is_finite() {
        return Err(Error::non_finite("flow matching loss"));
    }
    let upstream = residual * (2.0 / b);
    Ok((loss, net.backward_batch(&cache, upstream.view())?.params))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingMode {
    /// Pair the i-th source draw with the i-th target draw.
    Independent,
    BalancedOt,
    UnbalancedOt,
}

impl CouplingMode {
    pub fn name(self) -> &'static str {
        match self {
            CouplingMode::Independent => "independent",
            CouplingMode::BalancedOt => "balanced_ot",
            CouplingMode::UnbalancedOt => "unbalanced_ot",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "independent" => Some(Self::Independent),
            "balanced_ot" => Some(Self::BalancedOt),
            "unbalanced_ot" => Some(Self::UnbalancedOt),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FmTrainConfig {
    pub coupling_mode: CouplingMode,
    /// Batch coupling solver; its taus are forced to 1 in `BalancedOt` mode.
    pub solver: SolverConfig,
    pub batch_size: usize,
    pub iterations: usize,
    /// Standard deviation of the Gaussian path noise.
    pub sigma: f64,
    pub adam: AdamConfig,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for FmTrainConfig {
    fn default() -> Self {
        Self {
            coupling_mode: CouplingMode::Independent,
            solver: SolverConfig::default(),
            batch_size: 128,
            iterations: 5000,
            sigma: 0.0,
            adam: AdamConfig::default(),
            hidden: vec![128, 128, 128],
            seed: 0,
        }
    }
}

impl FmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coupling_mode != CouplingMode::Independent && self.batch_size < 2 {
            return Err(Error::OutOfRange { name: "batch_size", value: self.batch_size as f64, allowed: ">= 2 for OT couplings" });
        }
        if self.batch_size == 0 {
            return Err(Error::OutOfRange { name: "batch_size", value: 0.0, allowed: ">= 1" });
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::OutOfRange { name: "sigma", value: self.sigma, allowed: ">= 0" });
        }
        self.coupling_solver().validate()
    }

    pub fn coupling_solver(&self) -> SolverConfig {
        match self.coupling_mode {
            CouplingMode::BalancedOt => self.solver.with_tau(1.0, 1.0),
            _ => self.solver,
        }
    }
}

/// Pairs the two batches according to the coupling mode, draws `t ~ U[0, 1]`
/// per sample and builds the interpolants.
///
/// In the OT modes the batch plan is solved with uniform weights and
/// `batch_size` pairs are resampled from it. A solver error falls back to
/// independent pairing; the returned flag reports that.
pub fn make_training_batch(mu_batch: ArrayView2<'_, f64>, nu_batch: ArrayView2<'_, f64>, cfg: &FmTrainConfig, rng: &mut Rng) -> Result<(FlowBatch, bool)> {
    if mu_batch.nrows() == 0 || nu_batch.nrows() == 0 {
        return Err(Error::Empty("batch"));
    }
    if mu_batch.ncols() != nu_batch.ncols() {
        return Err(Error::DimensionMismatch { expected: mu_batch.ncols(), got: nu_batch.ncols() });
    }
    let mut fell_back = false;
    let (x0, x1) = match cfg.coupling_mode {
        CouplingMode::Independent => independent_pairs(mu_batch, nu_batch),
        CouplingMode::BalancedOt | CouplingMode::UnbalancedOt => {
            let k = mu_batch.nrows().max(nu_batch.nrows());
            match coupled_pairs(mu_batch, nu_batch, &cfg.coupling_solver(), k, rng) {
                Ok(pairs) => pairs,
                Err(e) => {
                    log::warn!("batch coupling failed ({e}); pairing independently");
                    fell_back = true;
                    independent_pairs(mu_batch, nu_batch)
                }
            }
        }
    };
    let n = x0.nrows();
    let t = Array1::from_iter((0..n).map(|_| rng.random::<f64>()));
    let batch = if cfg.sigma > 0.0 {
        let xi = Array2::from_shape_fn(x0.dim(), |_| rng.sample::<f64, _>(StandardNormal));
        FlowBatch::new(x0, x1, t, Some((cfg.sigma, &xi)))?
    } else {
        FlowBatch::new(x0, x1, t, None)?
    };
    Ok((batch, fell_back))
}

fn independent_pairs(mu: ArrayView2<'_, f64>, nu: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
    let n = mu.nrows().min(nu.nrows());
    (mu.slice(ndarray::s![..n, ..]).to_owned(), nu.slice(ndarray::s![..n, ..]).to_owned())
}

fn coupled_pairs(mu: ArrayView2<'_, f64>, nu: ArrayView2<'_, f64>, solver_cfg: &SolverConfig, k: usize, rng: &mut Rng) -> Result<(Array2<f64>, Array2<f64>)> {
    let cost = CostMatrix::sq_euclidean(mu, nu)?;
    let a = Array1::from_elem(mu.nrows(), 1.0 / mu.nrows() as f64);
    let b = Array1::from_elem(nu.nrows(), 1.0 / nu.nrows() as f64);
    let plan = solver::solve(a.view(), b.view(), &cost, solver_cfg)?;
    let pairs = rebalance::resample_pairs(&plan, k, rng)?;
    Ok(pairs.gather(mu, nu))
}

/// Draws `k` atom indices from a measure proportionally to its weights.
pub(crate) fn sample_indices(measure: &DiscreteMeasure, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(measure.weights().iter().copied()).map_err(|_| Error::ZeroMass)?;
    Ok((0..k).map(|_| dist.sample(rng)).collect())
}

/// A trained velocity field.
#[derive(Debug, Clone)]
pub struct TrainedFlow {
    pub field: Mlp,
    pub loss_history: Vec<f64>,
    /// Number of batches whose coupling failed and were paired independently.
    pub fallbacks: usize,
}

/// The velocity network `v(t, x)`: input `d + 1`, output `d`.
pub fn velocity_net(dim: usize, hidden: &[usize], seed: u64) -> Result<Mlp> {
    let mut sizes = vec![dim + 1];
    sizes.extend_from_slice(hidden);
    sizes.push(dim);
    Mlp::new(&sizes, Activation::Silu, OutputHead::Linear, seed)
}

/// Trains a velocity field for `cfg.iterations` Adam steps. Batches are drawn
/// with replacement from the two measures according to their weights.
pub fn train_fm(source: &DiscreteMeasure, target: &DiscreteMeasure, cfg: &FmTrainConfig) -> Result<TrainedFlow> {
    cfg.validate()?;
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch { expected: source.dim(), got: target.dim() });
    }
    let mut field = velocity_net(source.dim(), &cfg.hidden, cfg.seed)?;
    let mut adam = AdamState::new(field.param_count(), cfg.adam);
    let mut rng = rng::seeded(cfg.seed, rng::stream::TRAIN);
    let mut loss_history = Vec::with_capacity(cfg.iterations);
    let mut fallbacks = 0;
    for iteration in 0..cfg.iterations {
        let xi = sample_indices(source, cfg.batch_size, &mut rng)?;
        let yi = sample_indices(target, cfg.batch_size, &mut rng)?;
        let xb = source.points().select(Axis(0), &xi);
        let yb = target.points().select(Axis(0), &yi);
        let (batch, fell_back) = make_training_batch(xb.view(), yb.view(), cfg, &mut rng)?;
        fallbacks += usize::from(fell_back);
        let (loss, grad) = match fm_loss_and_grad(&field, &batch) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { iteration, checkpoint: Box::new(field) }),
            Err(e) => return Err(e),
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration, checkpoint: Box::new(field) });
        }
        adam.step(field.params_mut(), &grad)?;
        loss_history.push(loss);
    }
    Ok(TrainedFlow { field, loss_history, fallbacks })
}

/// A time-dependent vector field evaluated on a batch of points.
pub trait VectorField {
    fn velocity(&self, t: f64, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

impl VectorField for Mlp {
    fn velocity(&self, t: f64, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let times = Array1::from_elem(x.nrows(), t);
        self.forward_batch(with_time(x, times.view()).view())
    }
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F>(pub F);

impl<F> VectorField for FnField<F>
where
    F: Fn(f64, ArrayView2<'_, f64>) -> Array2<f64>,
{
    fn velocity(&self, t: f64, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok((self.0)(t, x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OdeMethod {
    Euler,
    #[default]
    Rk4,
}

impl OdeMethod {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "euler" => Some(Self::Euler),
            "rk4" => Some(Self::Rk4),
            _ => None,
        }
    }
}

fn ode_step<V: VectorField + ?Sized>(field: &V, t: f64, h: f64, x: &Array2<f64>, method: OdeMethod) -> Result<Array2<f64>> {
    match method {
        OdeMethod::Euler => {
            let k1 = field.velocity(t, x.view())?;
            Ok(x + &(k1 * h))
        }
        OdeMethod::Rk4 => {
            let k1 = field.velocity(t, x.view())?;
            let k2 = field.velocity(t + 0.5 * h, (x + &(&k1 * (0.5 * h))).view())?;
            let k3 = field.velocity(t + 0.5 * h, (x + &(&k2 * (0.5 * h))).view())?;
            let k4 = field.velocity(t + h, (x + &(&k3 * h)).view())?;
            Ok(x + &((k1 + &k2 * 2.0 + &k3 * 2.0 + k4) * (h / 6.0)))
        }
    }
}

/// Integrates `dx/dt = v(t, x)` from `t = 0` to `t = 1` with `steps` fixed
/// steps and returns every intermediate state, starting with `x0`.
pub fn trajectory<V: VectorField + ?Sized>(field: &V, x0: ArrayView2<'_, f64>, steps: usize, method: OdeMethod) -> Result<Vec<(f64, Array2<f64>)>> {
    if steps == 0 {
        return Err(Error::OutOfRange { name: "steps", value: 0.0, allowed: ">= 1" });
    }
    let h = 1.0 / steps as f64;
    let mut x = x0.to_owned();
    let mut out = Vec::with_capacity(steps + 1);
    out.push((0.0, x.clone()));
    for k in 0..steps {
        let t = k as f64 * h;
        x = ode_step(field, t, h, &x, method)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("ODE state at step {k}")));
        }
        out.push(((k + 1) as f64 * h, x.clone()));
    }
    Ok(out)
}

/// Endpoints `psi_1(x0)` for a batch of starting points.
pub fn integrate_batch<V: VectorField + ?Sized>(field: &V, x0: ArrayView2<'_, f64>, steps: usize, method: OdeMethod) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::OutOfRange { name: "steps", value: 0.0, allowed: ">= 1" });
    }
    let h = 1.0 / steps as f64;
    let mut x = x0.to_owned();
    for k in 0..steps {
        x = ode_step(field, k as f64 * h, h, &x, method)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("ODE state at step {k}")));
        }
    }
    Ok(x)
}

/// Endpoint `psi_1(x0)` for a single point.
pub fn integrate<V: VectorField + ?Sized>(field: &V, x0: &[f64], steps: usize, method: OdeMethod) -> Result<Vec<f64>> {
    let x = ArrayView2::from_shape((1, x0.len()), x0).expect("row vector");
    Ok(integrate_batch(field, x, steps, method)?.into_raw_vec_and_offset().0)
}

/// Mean Euclidean displacement `1/n sum ||psi_1(x_i) - x_i||`.
pub fn transport_cost<V: VectorField + ?Sized>(field: &V, test_points: ArrayView2<'_, f64>, steps: usize, method: OdeMethod) -> Result<f64> {
    if test_points.nrows() == 0 {
        return Err(Error::Empty("test points"));
    }
    let end = integrate_batch(field, test_points, steps, method)?;
    Ok(mean_displacement(test_points, end.view()))
}

pub(crate) fn mean_displacement(from: ArrayView2<'_, f64>, to: ArrayView2<'_, f64>) -> f64 {
    let total: f64 = from.outer_iter().zip(to.outer_iter()).map(|(a, b)| a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()).sum();
    total / from.nrows() as f64
}
