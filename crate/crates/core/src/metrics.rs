//! Evaluation of plans and learned maps.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// `(|P 1 - a|_inf, |P^T 1 - b|_inf)`.
pub fn marginal_deviation(plan: ArrayView2<'_, f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<(f64, f64)> {
    if plan.nrows() != a.len() {
        return Err(Error::DimensionMismatch { expected: plan.nrows(), got: a.len() });
    }
    if plan.ncols() != b.len() {
        return Err(Error::DimensionMismatch { expected: plan.ncols(), got: b.len() });
    }
    let rows = plan.rows().into_iter().zip(a).map(|(r, &ai)| (r.sum() - ai).abs()).fold(0.0, f64::max);
    let cols = plan.columns().into_iter().zip(b).map(|(c, &bj)| (c.sum() - bj).abs()).fold(0.0, f64::max);
    Ok((rows, cols))
}

/// Share of the plan's mass moved between differently labelled clusters.
/// A plan without mass has no cross-cluster mass.
pub fn cross_cluster_mass(plan: ArrayView2<'_, f64>, source_labels: &[usize], target_labels: &[usize]) -> Result<f64> {
    if plan.nrows() != source_labels.len() {
        return Err(Error::DimensionMismatch { expected: plan.nrows(), got: source_labels.len() });
    }
    if plan.ncols() != target_labels.len() {
        return Err(Error::DimensionMismatch { expected: plan.ncols(), got: target_labels.len() });
    }
    let mut cross = 0.0;
    let mut total = 0.0;
    for (row, &ls) in plan.rows().into_iter().zip(source_labels) {
        for (&p, &lt) in row.iter().zip(target_labels) {
            total += p;
            if ls != lt {
                cross += p;
            }
        }
    }
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok((cross / total).clamp(0.0, 1.0))
}

/// Mean point of every target label, indexed by label.
pub fn cluster_centers(points: ArrayView2<'_, f64>, labels: &[usize]) -> Result<BTreeMap<usize, Vec<f64>>> {
    if points.nrows() != labels.len() {
        return Err(Error::DimensionMismatch { expected: points.nrows(), got: labels.len() });
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (p, &l) in points.rows().into_iter().zip(labels) {
        let entry = sums.entry(l).or_insert_with(|| (vec![0.0; p.len()], 0));
        entry.0.iter_mut().zip(p).for_each(|(s, v)| *s += v);
        entry.1 += 1;
    }
    Ok(sums.into_iter().map(|(l, (s, c))| (l, s.into_iter().map(|v| v / c as f64).collect())).collect())
}

/// Fraction of mapped points whose nearest target cluster center carries the
/// partner class of their source label. The partner of class `k` is the
/// target class `k`.
pub fn map_class_consistency(mapped: ArrayView2<'_, f64>, source_labels: &[usize], target_points: ArrayView2<'_, f64>, target_labels: &[usize]) -> Result<f64> {
    if mapped.nrows() == 0 {
        return Err(Error::Empty("mapped points"));
    }
    if mapped.nrows() != source_labels.len() {
        return Err(Error::DimensionMismatch { expected: mapped.nrows(), got: source_labels.len() });
    }
    if mapped.ncols() != target_points.ncols() {
        return Err(Error::DimensionMismatch { expected: target_points.ncols(), got: mapped.ncols() });
    }
    let centers = cluster_centers(target_points, target_labels)?;
    if centers.is_empty() {
        return Err(Error::Empty("target clusters"));
    }
    if let Some(&bad) = source_labels.iter().find(|l| !centers.contains_key(l)) {
        return Err(Error::UnknownLabel(bad));
    }
    let mut hits = 0usize;
    for (p, &l) in mapped.rows().into_iter().zip(source_labels) {
        let nearest = centers
            .iter()
            .map(|(&label, c)| (label, p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(label, _)| label)
            .expect("nonempty");
        hits += usize::from(nearest == l);
    }
    Ok(hits as f64 / mapped.nrows() as f64)
}

/// Pairwise displacement norms `|y_i - x_i|`.
pub fn displacements(from: ArrayView2<'_, f64>, to: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if from.dim() != to.dim() {
        return Err(Error::DimensionMismatch { expected: from.len(), got: to.len() });
    }
    Ok(from.rows().into_iter().zip(to.rows()).map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    /// Standard deviation across runs; zero for a single run.
    pub std: f64,
}

/// Named metrics of one run with the settings that produced them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub dataset: String,
    pub estimator: String,
    pub tau: f64,
    pub seed: Option<u64>,
    pub metrics: Vec<Metric>,
    pub diagnostics: Vec<(String, String)>,
}

impl EvalReport {
    pub fn new(dataset: impl Into<String>, estimator: impl Into<String>, tau: f64, seed: Option<u64>) -> Self {
        Self { dataset: dataset.into(), estimator: estimator.into(), tau, seed, ..Self::default() }
    }

    /// Adds a metric. Names are unique and values finite.
    pub fn push(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::non_finite(format!("metric {name}")));
        }
        if self.get(name).is_some() {
            return Err(Error::Config { line: 0, message: format!("duplicate metric {name}") });
        }
        self.metrics.push(Metric { name: name.to_string(), value, std: 0.0 });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.diagnostics.push((key.to_string(), value.to_string()));
    }
}

/// Mean and population standard deviation of every metric across reports.
/// Reports must carry the same metric names in the same order.
pub fn summarize(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or(Error::NoData)?;
    let names: Vec<&str> = first.metrics.iter().map(|m| m.name.as_str()).collect();
    for r in reports {
        let other: Vec<&str> = r.metrics.iter().map(|m| m.name.as_str()).collect();
        if other != names {
            return Err(Error::DimensionMismatch { expected: names.len(), got: other.len() });
        }
    }
    let k = reports.len() as f64;
    let metrics = names
        .iter()
        .enumerate()
        .map(|(idx, name)| {
            let mean = reports.iter().map(|r| r.metrics[idx].value).sum::<f64>() / k;
            let var = reports.iter().map(|r| (r.metrics[idx].value - mean).powi(2)).sum::<f64>() / k;
            Metric { name: name.to_string(), value: mean, std: var.sqrt() }
        })
        .collect();
    let seed = if reports.len() == 1 { first.seed } else { None };
    Ok(EvalReport { seed, metrics, diagnostics: Vec::new(), ..first.clone() })
}

/// Points of a 2-D array as rows, for quick construction in tests and callers.
pub fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: rows.iter().map(Vec::len).find(|&l| l != d).unwrap_or(0) });
    }
    Ok(Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("shape"))
}
