//! Discrete measures, ground costs and the seeded synthetic datasets.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;

/// Tolerance under which a weight vector is considered to sum to one.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// A weighted point cloud `sum_i w_i delta_{x_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: Array2<f64>,
    weights: Array1<f64>,
    normalized: bool,
}

impl DiscreteMeasure {
    /// Builds a measure from an `n x d` point matrix. Missing weights default to `1/n`.
    pub fn new(points: Array2<f64>, weights: Option<Array1<f64>>) -> Result<Self> {
        let (n, d) = points.dim();
        if n == 0 {
            return Err(Error::Empty("points"));
        }
        if d == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("points"));
        }
        let weights = match weights {
            None => Array1::from_elem(n, 1.0 / n as f64),
            Some(w) => {
                if w.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: w.len() });
                }
                for (index, &value) in w.iter().enumerate() {
                    if !value.is_finite() {
                        return Err(Error::non_finite("weights"));
                    }
                    if value < 0.0 {
                        return Err(Error::NegativeWeight { index, value });
                    }
                }
                w
            }
        };
        let total: f64 = weights.sum();
        if total <= 0.0 {
            return Err(Error::ZeroMass);
        }
        let normalized = (total - 1.0).abs() <= NORMALIZATION_TOL;
        Ok(Self { points, weights, normalized })
    }

    pub fn uniform(points: Array2<f64>) -> Result<Self> {
        Self::new(points, None)
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.points.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.sum()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// The same support with weights rescaled to sum to one.
    pub fn normalized(&self) -> Self {
        let total = self.total_mass();
        Self { points: self.points.clone(), weights: &self.weights / total, normalized: true }
    }
}

/// Builds a measure from a list of points. Points must share one dimension.
pub fn make_measure(points: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> Result<DiscreteMeasure> {
    if points.is_empty() {
        return Err(Error::Empty("points"));
    }
    let d = points[0].len();
    for p in &points {
        if p.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: p.len() });
        }
    }
    let n = points.len();
    let flat: Vec<f64> = points.into_iter().flatten().collect();
    let points = Array2::from_shape_vec((n, d), flat).expect("shape checked");
    DiscreteMeasure::new(points, weights.map(Array1::from_vec))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroundCost {
    /// `c(x, y) = |x - y|^2`.
    #[default]
    SqEuclidean,
}

/// Dense `n x m` ground cost matrix together with its mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: Array2<f64>,
    mean: f64,
}

impl CostMatrix {
    pub fn from_entries(entries: Array2<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("cost matrix"));
        }
        let mean = entries.sum() / entries.len() as f64;
        Ok(Self { entries, mean })
    }

    /// Squared Euclidean costs between the rows of `x` and the rows of `y`.
    pub fn sq_euclidean(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<Self> {
        if x.ncols() != y.ncols() {
            return Err(Error::DimensionMismatch { expected: x.ncols(), got: y.ncols() });
        }
        if x.nrows() == 0 || y.nrows() == 0 {
            return Err(Error::Empty("point set"));
        }
        let (n, m) = (x.nrows(), y.nrows());
        let mut entries = Array2::zeros((n, m));
        for (i, xi) in x.outer_iter().enumerate() {
            for (j, yj) in y.outer_iter().enumerate() {
                entries[[i, j]] = xi.iter().zip(yj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        Self::from_entries(entries)
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.dim()
    }

    /// The matrix multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self { entries: &self.entries * s, mean: self.mean * s }
    }
}

pub fn cost_matrix(src: &DiscreteMeasure, tgt: &DiscreteMeasure, cost: GroundCost) -> Result<CostMatrix> {
    match cost {
        GroundCost::SqEuclidean => CostMatrix::sq_euclidean(src.points(), tgt.points()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    UniformMixture,
    GaussianImbalance,
    GaussianOutliers,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::UniformMixture => "uniform_mixture",
            DatasetKind::GaussianImbalance => "gaussian_imbalance",
            DatasetKind::GaussianOutliers => "gaussian_outliers",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "uniform_mixture" => Some(DatasetKind::UniformMixture),
            "gaussian_imbalance" => Some(DatasetKind::GaussianImbalance),
            "gaussian_outliers" => Some(DatasetKind::GaussianOutliers),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

/// Parameters of a seeded synthetic dataset.
///
/// Class `k` of the source is paired with class `k` of the target. For the
/// uniform mixture, class 0 is the left column of boxes and class 1 the right
/// one; the boxes themselves are fixed and the centers are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub source_counts: Vec<usize>,
    pub target_counts: Vec<usize>,
    pub source_centers: Vec<Vec<f64>>,
    pub target_centers: Vec<Vec<f64>>,
    /// Standard deviation of every Gaussian cluster.
    pub noise_scale: f64,
    /// Fraction of the source measure made of outliers (gaussian_outliers only).
    pub outlier_fraction: f64,
    pub seed: u64,
}

/// Left/right boxes of the uniform mixture: x-ranges, then y-ranges per role.
const MIXTURE_X: [(f64, f64); 2] = [(-0.5, 0.5), (4.5, 5.5)];
const MIXTURE_Y_SOURCE: (f64, f64) = (-1.5, -0.5);
const MIXTURE_Y_TARGET: (f64, f64) = (0.5, 1.5);

impl DatasetSpec {
    /// Mixture of uniforms: 180 bottom-left and 120 bottom-right source points,
    /// 180 top-right and 120 top-left target points.
    pub fn uniform_mixture(seed: u64) -> Self {
        Self {
            kind: DatasetKind::UniformMixture,
            source_counts: vec![180, 120],
            target_counts: vec![120, 180],
            source_centers: vec![vec![0.0, -1.0], vec![5.0, -1.0]],
            target_centers: vec![vec![0.0, 1.0], vec![5.0, 1.0]],
            noise_scale: 0.0,
            outlier_fraction: 0.0,
            seed,
        }
    }

    /// Two Gaussian classes whose proportions flip between source (150/50)
    /// and target (50/150).
    pub fn gaussian_imbalance(seed: u64) -> Self {
        Self {
            kind: DatasetKind::GaussianImbalance,
            source_counts: vec![150, 50],
            target_counts: vec![50, 150],
            source_centers: vec![vec![0.0, 0.0], vec![0.0, 6.0]],
            target_centers: vec![vec![4.0, 0.0], vec![4.0, 6.0]],
            noise_scale: 0.5,
            outlier_fraction: 0.0,
            seed,
        }
    }

    /// Balanced Gaussian classes with a fraction of far-away source outliers.
    pub fn gaussian_outliers(seed: u64, outlier_fraction: f64) -> Self {
        Self {
            kind: DatasetKind::GaussianOutliers,
            source_counts: vec![100, 100],
            target_counts: vec![100, 100],
            outlier_fraction,
            ..Self::gaussian_imbalance(seed)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The same dataset under an unrelated seed, for held-out evaluation points.
    pub fn held_out(&self) -> Self {
        let mut rng = rng::seeded(self.seed, rng::stream::HELD_OUT);
        self.clone().with_seed(rand::RngCore::next_u64(&mut rng))
    }

    pub fn num_classes(&self) -> usize {
        self.source_counts.len()
    }

    /// Label carried by injected outliers.
    pub fn outlier_label(&self) -> usize {
        self.num_classes()
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            DatasetKind::UniformMixture => 2,
            _ => self.source_centers.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.source_counts.len();
        if k == 0 || self.target_counts.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: self.target_counts.len() });
        }
        if self.source_counts.iter().chain(&self.target_counts).any(|&c| c == 0) {
            return Err(Error::Empty("cluster count"));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::OutOfRange { name: "outlier_fraction", value: self.outlier_fraction, allowed: "[0, 1)" });
        }
        match self.kind {
            DatasetKind::UniformMixture => {
                if k != 2 {
                    return Err(Error::DimensionMismatch { expected: 2, got: k });
                }
            }
            DatasetKind::GaussianImbalance | DatasetKind::GaussianOutliers => {
                if self.source_centers.len() != k || self.target_centers.len() != k {
                    return Err(Error::DimensionMismatch { expected: k, got: self.source_centers.len() });
                }
                let d = self.dim();
                if d == 0 {
                    return Err(Error::DimensionMismatch { expected: 1, got: 0 });
                }
                for c in self.source_centers.iter().chain(&self.target_centers) {
                    if c.len() != d {
                        return Err(Error::DimensionMismatch { expected: d, got: c.len() });
                    }
                }
                if !(self.noise_scale > 0.0) {
                    return Err(Error::OutOfRange { name: "noise_scale", value: self.noise_scale, allowed: "> 0" });
                }
            }
        }
        Ok(())
    }

    /// Draws the measure for `role`, dispatching on the dataset kind.
    pub fn sample(&self, role: Role) -> Result<LabeledMeasure> {
        match self.kind {
            DatasetKind::UniformMixture => sample_uniform_mixture(self, role),
            _ => sample_synthetic(self, role),
        }
    }
}

/// A measure with one cluster label per atom.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMeasure {
    pub measure: DiscreteMeasure,
    pub labels: Vec<usize>,
}

fn role_stream(role: Role) -> u64 {
    match role {
        Role::Source => rng::stream::SOURCE,
        Role::Target => rng::stream::TARGET,
    }
}

/// Samples the mixture of uniform distributions. Every draw lies inside its
/// box: `[a, b) x [c, d)` for the corresponding cluster.
pub fn sample_uniform_mixture(spec: &DatasetSpec, role: Role) -> Result<LabeledMeasure> {
    if spec.kind != DatasetKind::UniformMixture {
        return Err(Error::WrongKind { expected: "uniform_mixture", got: spec.kind.name() });
    }
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed, role_stream(role));
    let (counts, (y_lo, y_hi)) = match role {
        Role::Source => (&spec.source_counts, MIXTURE_Y_SOURCE),
        Role::Target => (&spec.target_counts, MIXTURE_Y_TARGET),
    };
    // Source lists the 180-point cluster first (bottom left), target lists it
    // first as well (top right), so the larger cluster always leads.
    let order: [usize; 2] = match role {
        Role::Source => [0, 1],
        Role::Target => [1, 0],
    };
    let n: usize = counts.iter().sum();
    let mut flat = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for &label in &order {
        let (x_lo, x_hi) = MIXTURE_X[label];
        for _ in 0..counts[label] {
            flat.push(rng.random_range(x_lo..x_hi));
            flat.push(rng.random_range(y_lo..y_hi));
            labels.push(label);
        }
    }
    let points = Array2::from_shape_vec((n, 2), flat).expect("shape");
    Ok(LabeledMeasure { measure: DiscreteMeasure::uniform(points)?, labels })
}

/// Samples the Gaussian class mixtures (`gaussian_imbalance`, `gaussian_outliers`).
///
/// Outliers are only injected into the source measure. They sit at distance
/// `max_k |c_k - m| + 12 sigma` from the mean `m` of the source centers in a
/// uniformly random direction, hence at least `12 sigma` from every center.
pub fn sample_synthetic(spec: &DatasetSpec, role: Role) -> Result<LabeledMeasure> {
    if spec.kind == DatasetKind::UniformMixture {
        return Err(Error::WrongKind { expected: "gaussian_imbalance | gaussian_outliers", got: spec.kind.name() });
    }
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed, role_stream(role));
    let (counts, centers) = match role {
        Role::Source => (&spec.source_counts, &spec.source_centers),
        Role::Target => (&spec.target_counts, &spec.target_centers),
    };
    let d = spec.dim();
    let sigma = spec.noise_scale;
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    for (label, (&count, center)) in counts.iter().zip(centers).enumerate() {
        for _ in 0..count {
            for &c in center {
                let z: f64 = rng.sample(StandardNormal);
                flat.push(c + sigma * z);
            }
            labels.push(label);
        }
    }
    let inliers = labels.len();
    if spec.kind == DatasetKind::GaussianOutliers && role == Role::Source && spec.outlier_fraction > 0.0 {
        let f = spec.outlier_fraction;
        let n_out = (f * inliers as f64 / (1.0 - f)).round() as usize;
        let all: Vec<&Vec<f64>> = spec.source_centers.iter().chain(&spec.target_centers).collect();
        let mean: Vec<f64> = (0..d).map(|k| all.iter().map(|c| c[k]).sum::<f64>() / all.len() as f64).collect();
        let spread = all.iter().map(|c| c.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()).fold(0.0, f64::max);
        let radius = spread + 12.0 * sigma;
        for _ in 0..n_out {
            let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.iter_mut().for_each(|v| *v /= norm);
            flat.extend(mean.iter().zip(&dir).map(|(m, u)| m + radius * u));
            labels.push(spec.outlier_label());
        }
    }
    let n = labels.len();
    let points = Array2::from_shape_vec((n, d), flat).expect("shape");
    Ok(LabeledMeasure { measure: DiscreteMeasure::uniform(points)?, labels })
}
