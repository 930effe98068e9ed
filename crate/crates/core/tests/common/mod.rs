#![allow(dead_code)]

use betafact::models::{check_constraints, ModelKind, Theta};
use betafact::solvers::{Block, FitObserver};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

/// Columns drawn uniformly then scaled to sum to one.
pub fn stochastic(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut a = uniform(rows, cols, 0.05, 1.0, seed);
    for mut c in a.columns_mut() {
        let s = c.sum();
        c.mapv_inplace(|v| v / s);
    }
    a
}

/// Multiplies every entry by `1 + amount * u`, `u` uniform in [-1, 1].
pub fn perturb(a: &Array2<f64>, amount: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    a.mapv(|v| v * (1.0 + amount * rng.random_range(-1.0..1.0)))
}

pub fn renormalize_columns(a: &mut Array2<f64>) {
    for mut c in a.columns_mut() {
        let s = c.sum();
        c.mapv_inplace(|v| v / s);
    }
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Records every constraint violation seen after any block.
pub struct ConstraintWatch {
    pub kind: ModelKind,
    pub checked: usize,
    pub violations: Vec<String>,
}

impl ConstraintWatch {
    pub fn new(kind: ModelKind) -> Self {
        ConstraintWatch { kind, checked: 0, violations: Vec::new() }
    }
}

impl FitObserver for ConstraintWatch {
    fn after_block(&mut self, iteration: usize, block: Block, theta: &Theta) {
        self.checked += 1;
        for v in check_constraints(self.kind, theta) {
            self.violations.push(format!("iteration {iteration}, block {block}: {v}"));
        }
    }
}
