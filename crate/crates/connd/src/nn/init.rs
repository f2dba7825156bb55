//! Deterministic parameter initialization.

use ndarray::{Array1, Array2};
use rand::Rng;

/// Kaiming-uniform weight init for ReLU networks: U(-b, b) with
/// b = sqrt(6 / fan_in). Elements are drawn in row-major order so the same
/// seed always yields the same tensor.
pub fn kaiming_uniform<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Array2<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    let mut w = Array2::<f32>::zeros((rows, cols));
    for v in w.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
    w
}

pub fn zero_bias(len: usize) -> Array1<f32> {
    Array1::zeros(len)
}
