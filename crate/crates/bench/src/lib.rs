//! Shared fixtures for the criterion benchmarks.

use uotkit::DiscreteMeasure;

/// Two well separated Gaussian-like clouds of `n` points each, laid out on a
/// deterministic lattice so that benchmarks do not depend on an RNG.
pub fn lattice_pair(n: usize) -> (DiscreteMeasure, DiscreteMeasure) {
    let side = (n as f64).sqrt().ceil() as usize;
    let grid = |shift: f64| {
        let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![(i % side) as f64 * 0.1 + shift, (i / side) as f64 * 0.1]).collect();
        uotkit::make_measure(pts, None).expect("lattice measure")
    };
    (grid(0.0), grid(3.0))
}
