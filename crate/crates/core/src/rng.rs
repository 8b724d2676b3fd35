//! Seeded random source.
//!
//! Uniforms come from SplitMix64, a counter-based generator: the state is a
//! 64-bit counter advanced by a fixed odd increment and each output is a
//! bijective mix of the counter. Normals use the Box–Muller transform on
//! pairs of uniforms; the second value of each pair is kept for the next
//! call.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags for [`Rng::derive`], so that shuffling, augmentation,
/// corruption and initialization never share a stream.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const CORRUPT: u64 = 4;
    pub const SYNTH_TRAIN: u64 = 5;
    pub const SYNTH_TEST: u64 = 6;
    pub const LABELS: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const HEAD: u64 = 9;
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    counter: u64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            counter: 0,
            spare: None,
        }
    }

    /// Independent generator keyed by `seed` and a path of words, e.g.
    /// `(run_seed, [stream::CORRUPT, epoch, batch])`.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let mut h = mix64(seed ^ GOLDEN);
        for &w in path {
            h = mix64(h ^ mix64(w.wrapping_add(GOLDEN)));
        }
        Rng::new(h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal sample.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Tensor of i.i.d. `N(mean, std²)` samples.
    pub fn gaussian<T: Element>(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor<T>> {
        if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gaussian needs finite mean and std >= 0, got mean={mean} std={std}"
            )));
        }
        if std == 0.0 {
            return Tensor::full(shape, T::from_f64(mean));
        }
        Tensor::from_fn(shape, |_| T::from_f64(mean + std * self.normal()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    #[test]
    fn zero_std_is_constant() {
        let t: Tensor<f32> = Rng::new(1).gaussian(&[3, 4], 2.5, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn negative_std_rejected() {
        assert!(Rng::new(1).gaussian::<f32>(&[2], 0.0, -1.0).is_err());
    }

    #[test]
    fn sample_std_sigma_30() {
        let t: Tensor<f64> = Rng::new(2024).gaussian(&[1_000_000], 0.0, 30.0).unwrap();
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 30.0).abs() < 0.6, "std {}", var.sqrt());
        assert!(mean.abs() < 0.2, "mean {mean}");
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::new(9);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn derived_streams_differ() {
        let a = Rng::derive(7, &[stream::CORRUPT, 0, 0]).next_u64();
        let b = Rng::derive(7, &[stream::CORRUPT, 0, 1]).next_u64();
        let c = Rng::derive(7, &[stream::AUGMENT, 0, 0]).next_u64();
        assert!(a != b && a != c && b != c);
    }

    proptest! {
        #[test]
        fn same_seed_same_stream(seed in any::<u64>()) {
            let x: Tensor<f32> = Rng::new(seed).gaussian(&[2, 3, 5], 0.0, 1.0).unwrap();
            let y: Tensor<f32> = Rng::new(seed).gaussian(&[2, 3, 5], 0.0, 1.0).unwrap();
            prop_assert_eq!(
                x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn below_in_range(seed in any::<u64>(), n in 1usize..1000) {
            let mut rng = Rng::new(seed);
            for _ in 0..32 {
                prop_assert!(rng.below(n) < n);
            }
        }
    }
}
