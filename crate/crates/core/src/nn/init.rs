//! Seeded parameter initialization.
//!
//! Kaiming-uniform draws from a ChaCha stream so that the same seed and the
//! same construction order always yield bitwise-identical parameters.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub type InitRng = ChaCha12Rng;

pub fn seeded_rng(seed: u64) -> InitRng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Uniform draw in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
pub fn kaiming_uniform(rng: &mut InitRng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product mismatch")
}
