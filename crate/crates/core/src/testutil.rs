use ndarray::Array2;
use rand::Rng;

use crate::discrete_prob::{DiscreteJoint, ScoreTable, Statistic};

/// Strictly positive joint with entries drawn from `U(0.05, 1)` then normalized.
pub fn random_joint<R: Rng>(rng: &mut R, nx: usize, ny: usize) -> DiscreteJoint<f64> {
    let w = Array2::from_shape_fn((nx, ny), |_| rng.random_range(0.05..1.0));
    DiscreteJoint::from_weights(w).unwrap()
}

pub fn random_scores<R: Rng>(rng: &mut R, nx: usize, ny: usize, scale: f64) -> ScoreTable<f64> {
    ScoreTable::new(Array2::from_shape_fn((nx, ny), |_| {
        scale * rng.random_range(-1.0..1.0)
    }))
    .unwrap()
}

/// Random map into `1..=n` cells, not necessarily surjective.
pub fn random_statistic<R: Rng>(rng: &mut R, n: usize) -> Statistic {
    let n_out = rng.random_range(1..=n);
    Statistic::new((0..n).map(|_| rng.random_range(0..n_out)).collect(), n_out).unwrap()
}
