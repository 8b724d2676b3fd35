//! Inputs shared by the benchmarks.

use scae_core::{Rng, Tensor};

/// Normal-distributed batch of shape `(n, c, h, w)`.
pub fn batch(seed: u64, n: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
    Rng::new(seed).gaussian(&[n, c, h, w], 0.0, 1.0).expect("valid shape")
}
