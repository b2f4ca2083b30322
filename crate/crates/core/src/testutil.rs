use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

pub fn uniform<T: Scalar>(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::cast_from(rng.random_range(lo..hi))).collect();
    Tensor::new(shape, data).unwrap()
}

/// Uniform in `[-1, 1]` but kept at least `margin` away from zero.
pub fn away_from_zero(shape: &[usize], seed: u64, margin: f64) -> Tensor<f64> {
    uniform::<f64>(shape, seed, -1.0, 1.0).map(|v| if v.abs() < margin { v.signum() * margin + v } else { v })
}
