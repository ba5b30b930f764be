//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

/// `fan_in × fan_out` matrix, uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape")
}

/// Rank-1 zero bias.
pub fn zero_bias(n: usize) -> Tensor {
    Tensor::zeros(&[n])
}

/// `rows × cols` table with `N(0, std²)` entries.
pub fn normal_table(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}
