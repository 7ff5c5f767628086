//! Multilayer perceptrons with hand-written reverse mode, Adam, and a
//! finite-difference gradient checker.
//!
//! All parameters of an [`Mlp`] live in one flat vector: for every layer the
//! row-major `fan_out x fan_in` weight matrix followed by its bias. Batched
//! evaluation takes one sample per row.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// Sigmoid-weighted linear unit, `x * sigmoid(x)`.
    #[default]
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputHead {
    #[default]
    Linear,
    /// `log(1 + exp(x))`, for nonnegative outputs.
    Softplus,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z * sigmoid(z),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

impl OutputHead {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            OutputHead::Linear => z,
            OutputHead::Softplus => softplus(z),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            OutputHead::Linear => 1.0,
            OutputHead::Softplus => sigmoid(z),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    activation: Activation,
    head: OutputHead,
}

/// Intermediate values of a batched forward pass, consumed by [`Mlp::backward_batch`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer inputs: `inputs[0]` is the batch, `inputs[l]` the activations feeding layer `l`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Parameter and input gradients from a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub inputs: Array2<f64>,
}

impl Mlp {
    /// Zero-initialised network with layer sizes `[d_in, hidden..., d_out]`.
    pub fn zeros(sizes: &[usize], activation: Activation, head: OutputHead) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Empty("layer sizes"));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        let count = sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; count], activation, head })
    }

    /// Fan-in scaled uniform initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases.
    pub fn new(sizes: &[usize], activation: Activation, head: OutputHead, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation, head)?;
        let mut rng = rng::seeded(seed, rng::stream::INIT);
        for layer in 0..net.num_layers() {
            let bound = 1.0 / (net.sizes[layer] as f64).sqrt();
            let (start, end) = (net.weight_offset(layer), net.bias_offset(layer) + net.sizes[layer + 1]);
            for p in &mut net.params[start..end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn weight_offset(&self, layer: usize) -> usize {
        self.sizes.windows(2).take(layer).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn bias_offset(&self, layer: usize) -> usize {
        self.weight_offset(layer) + self.sizes[layer] * self.sizes[layer + 1]
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let start = self.weight_offset(layer);
        ArrayView2::from_shape((fan_out, fan_in), &self.params[start..start + fan_in * fan_out]).expect("layout")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let start = self.bias_offset(layer);
        ArrayView1::from(&self.params[start..start + self.sizes[layer + 1]])
    }

    fn check_inputs(&self, inputs: &ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: inputs.ncols() });
        }
        Ok(())
    }

    /// Evaluates the network on a batch (one sample per row).
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_inputs(&inputs)?;
        let mut h = inputs.to_owned();
        for layer in 0..self.num_layers() {
            let mut z = h.dot(&self.weight(layer).t());
            z += &self.bias(layer);
            h = if layer + 1 == self.num_layers() { z.mapv_into(|v| self.head.apply(v)) } else { z.mapv_into(|v| self.activation.apply(v)) };
        }
        Ok(h)
    }

    /// Forward pass keeping what the backward pass needs.
    pub fn forward_with_cache(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_inputs(&inputs)?;
        let mut layer_inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut h = inputs.to_owned();
        for layer in 0..self.num_layers() {
            let mut z = h.dot(&self.weight(layer).t());
            z += &self.bias(layer);
            let next = if layer + 1 == self.num_layers() { z.mapv(|v| self.head.apply(v)) } else { z.mapv(|v| self.activation.apply(v)) };
            layer_inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok(ForwardCache { inputs: layer_inputs, pre, output: h })
    }

    /// Reverse mode: given `dL/d(output)` per sample, returns `dL/d(params)`
    /// summed over the batch and `dL/d(inputs)` per sample.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: ArrayView2<'_, f64>) -> Result<Gradients> {
        if upstream.dim() != cache.output.dim() {
            return Err(Error::DimensionMismatch { expected: cache.output.len(), got: upstream.len() });
        }
        let mut grads = vec![0.0; self.params.len()];
        let last = self.num_layers() - 1;
        let mut delta = upstream.to_owned();
        delta.zip_mut_with(&cache.pre[last], |d, &z| *d *= self.head.derivative(z));
        for layer in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
            let gw = delta.t().dot(&cache.inputs[layer]);
            let w_off = self.weight_offset(layer);
            // `dot` may hand back a column-major result; copy in logical order.
            grads[w_off..w_off + fan_in * fan_out].iter_mut().zip(gw.iter()).for_each(|(g, &v)| *g = v);
            let gb = delta.sum_axis(Axis(0));
            let b_off = self.bias_offset(layer);
            grads[b_off..b_off + fan_out].iter_mut().zip(gb.iter()).for_each(|(g, &v)| *g = v);
            let mut prev = delta.dot(&self.weight(layer));
            if layer > 0 {
                prev.zip_mut_with(&cache.pre[layer - 1], |d, &z| *d *= self.activation.derivative(z));
            }
            delta = prev;
        }
        Ok(Gradients { params: grads, inputs: delta })
    }

    fn single_input(&self, x: &[f64], t: Option<f64>) -> Result<Array2<f64>> {
        let mut row = x.to_vec();
        row.extend(t);
        if row.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: row.len() });
        }
        Ok(Array2::from_shape_vec((1, row.len()), row).expect("shape"))
    }

    /// Evaluates a single point; `t`, when given, is appended as the last input coordinate.
    pub fn forward(&self, x: &[f64], t: Option<f64>) -> Result<Vec<f64>> {
        Ok(self.forward_batch(self.single_input(x, t)?.view())?.into_raw_vec_and_offset().0)
    }

    /// Returns the parameter gradient and the gradient w.r.t. `x` (the time
    /// coordinate's gradient is dropped).
    pub fn backward(&self, x: &[f64], t: Option<f64>, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let input = self.single_input(x, t)?;
        let cache = self.forward_with_cache(input.view())?;
        let up =
            ArrayView2::from_shape((1, upstream.len()), upstream).map_err(|_| Error::DimensionMismatch { expected: self.output_dim(), got: upstream.len() })?;
        let g = self.backward_batch(&cache, up)?;
        let dx = g.inputs.row(0).slice(s![..x.len()]).to_vec();
        Ok((g.params, dx))
    }

    const MAGIC: &'static [u8; 8] = b"UOTMLP01";

    /// Little-endian checkpoint: magic, layer count (u32), sizes (u32 each),
    /// activation (u8), head (u8), then every parameter as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.sizes.len() + 8 * self.params.len());
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&(self.sizes.len() as u32).to_le_bytes());
        for &s in &self.sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.push(match self.activation {
            Activation::Silu => 0,
        });
        out.push(match self.head {
            OutputHead::Linear => 0,
            OutputHead::Softplus => 1,
        });
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Parse(format!("checkpoint: {msg}"));
        let mut rest = bytes.strip_prefix(Self::MAGIC.as_slice()).ok_or_else(|| bad("bad magic"))?;
        let mut take = |n: usize| -> Result<&[u8]> {
            if rest.len() < n {
                return Err(bad("truncated"));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let layers = u32_at(take(4)?);
        let sizes: Vec<usize> = (0..layers).map(|_| take(4).map(u32_at)).collect::<Result<_>>()?;
        let activation = match take(1)?[0] {
            0 => Activation::Silu,
            _ => return Err(bad("unknown activation")),
        };
        let head = match take(1)?[0] {
            0 => OutputHead::Linear,
            1 => OutputHead::Softplus,
            _ => return Err(bad("unknown output head")),
        };
        let mut net = Self::zeros(&sizes, activation, head)?;
        for p in net.params.iter_mut() {
            *p = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(net)
    }
}

/// Appends a time column `t` to a batch of points.
pub fn with_time(x: ArrayView2<'_, f64>, t: ArrayView1<'_, f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d + 1));
    out.slice_mut(s![.., ..d]).assign(&x);
    out.column_mut(d).assign(&t);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { first_moment: vec![0.0; len], second_moment: vec![0.0; len], step: 0, config }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let len = self.first_moment.len();
        if params.len() != len || grads.len() != len {
            return Err(Error::DimensionMismatch { expected: len, got: if params.len() != len { params.len() } else { grads.len() } });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::non_finite(format!("gradient coordinate {i}")));
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut())) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Summary of a finite-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
}

/// Step of the central differences.
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Gradient magnitude below which errors are measured absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient returned by `loss_fn` against central
/// finite differences on at most `max_coords` randomly chosen parameters.
///
/// The relative error of one coordinate is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check_params<F>(params: &[f64], mut loss_fn: F, max_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = loss_fn(params)?;
    if analytic.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), got: analytic.len() });
    }
    let mut rng = rng::seeded(seed, rng::stream::GRAD_CHECK);
    let k = max_coords.min(params.len());
    let mut coords = index::sample(&mut rng, params.len(), k).into_vec();
    coords.sort_unstable();
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + GRAD_CHECK_STEP;
        let (plus, _) = loss_fn(&work)?;
        work[i] = orig - GRAD_CHECK_STEP;
        let (minus, _) = loss_fn(&work)?;
        work[i] = orig;
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(err);
    }
    Ok(GradCheckReport { max_relative_error: worst, coordinates_checked: coords.len() })
}

/// [`grad_check_params`] for a loss defined on a network.
pub fn grad_check<F>(net: &Mlp, mut loss_fn: F, max_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    F: FnMut(&Mlp) -> Result<(f64, Vec<f64>)>,
{
    let mut probe = net.clone();
    grad_check_params(
        net.params(),
        |p| {
            probe.set_params(p)?;
            loss_fn(&probe)
        },
        max_coords,
        seed,
    )
}

/// Mean squared error `1/n sum (net(x_i) - y_i)^2` for a scalar-output network
/// and its parameter gradient.
pub fn mse_loss_and_grad(net: &Mlp, inputs: ArrayView2<'_, f64>, targets: ArrayView1<'_, f64>) -> Result<(f64, Vec<f64>)> {
    if net.output_dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: net.output_dim() });
    }
    if inputs.nrows() != targets.len() {
        return Err(Error::DimensionMismatch { expected: inputs.nrows(), got: targets.len() });
    }
    if targets.is_empty() {
        return Err(Error::NoData);
    }
    let cache = net.forward_with_cache(inputs)?;
    let n = targets.len() as f64;
    let residual: Array1<f64> = &cache.output().column(0) - &targets;
    let loss = residual.iter().map(|r| r * r).sum::<f64>() / n;
    let upstream = (residual * (2.0 / n)).insert_axis(Axis(1));
    let grads = net.backward_batch(&cache, upstream.view())?;
    Ok((loss, grads.params))
}
