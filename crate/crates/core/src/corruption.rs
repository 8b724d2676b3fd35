//! Gaussian pixel noise and adjacent-block masking, applied to raw
//! `[0, 255]` pixels before normalization.

use std::fmt;

use crate::error::{Error, Result};
use crate::report::PSNR_CAP;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CorruptionKind {
    /// Additive `N(0, sigma²)` per pixel, sigma on the 0–255 scale, no
    /// clipping.
    Gaussian { sigma: f64 },
    /// `num_blocks` rectangles per image at independent uniform positions
    /// (they may overlap), zeroed across all channels.
    BlockMask {
        num_blocks: usize,
        block_h: usize,
        block_w: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Chance that a given image is corrupted at all.
    pub apply_probability: f64,
}

impl CorruptionSpec {
    pub fn gaussian(sigma: f64) -> Self {
        CorruptionSpec {
            kind: CorruptionKind::Gaussian { sigma },
            apply_probability: 1.0,
        }
    }

    pub fn blocks(num_blocks: usize, block_h: usize, block_w: usize) -> Self {
        CorruptionSpec {
            kind: CorruptionKind::BlockMask {
                num_blocks,
                block_h,
                block_w,
            },
            apply_probability: 1.0,
        }
    }

    /// Four square blocks of side `ceil(min(h, w) / 4)`.
    pub fn default_blocks(h: usize, w: usize) -> Self {
        let side = h.min(w).div_ceil(4);
        Self::blocks(4, side, side)
    }

    pub fn with_probability(mut self, p: f64) -> Self {
        self.apply_probability = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::config(
                "corrupt_prob",
                format!("probability {} outside [0, 1]", self.apply_probability),
            ));
        }
        match self.kind {
            CorruptionKind::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::config("noise", format!("sigma must be finite and >= 0, got {sigma}")))
            }
            CorruptionKind::BlockMask { block_h, block_w, .. } if block_h == 0 || block_w == 0 => {
                Err(Error::config("noise", "block sides must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Parses `gaussian:SIGMA`, `block:N:H:W`, or `block` for
    /// [`default_blocks`](Self::default_blocks) on an `image` of `(h, w)`.
    pub fn parse(text: &str, image: (usize, usize)) -> Result<Self> {
        let bad = || Error::config("noise", format!("expected gaussian:SIGMA or block[:N:H:W], got `{text}`"));
        let parts: Vec<&str> = text.trim().split(':').collect();
        let spec = match parts.as_slice() {
            ["gaussian", sigma] => Self::gaussian(sigma.parse().map_err(|_| bad())?),
            ["block"] => Self::default_blocks(image.0, image.1),
            ["block", n, h, w] => Self::blocks(
                n.parse().map_err(|_| bad())?,
                h.parse().map_err(|_| bad())?,
                w.parse().map_err(|_| bad())?,
            ),
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            CorruptionKind::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            CorruptionKind::BlockMask {
                num_blocks,
                block_h,
                block_w,
            } => write!(f, "block:{num_blocks}:{block_h}:{block_w}"),
        }
    }
}

/// Returns the corrupted batch and a mask that is 0 inside dropped blocks
/// and 1 elsewhere (all ones for Gaussian noise). Per image the draws are:
/// the apply decision (skipped when the probability is 1), then the noise
/// or the block positions as `(row, column)` pairs.
pub fn corrupt(batch: &Tensor<f32>, spec: &CorruptionSpec, rng: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    spec.validate()?;
    let (_, c, h, w) = batch.dims4()?;
    let mut out = batch.clone();
    let mut mask = Tensor::<f32>::ones(batch.shape())?;
    let item = c * h * w;
    let plane = h * w;
    if let CorruptionKind::BlockMask { block_h, block_w, .. } = spec.kind {
        if block_h > h || block_w > w {
            return Err(Error::Geometry(format!(
                "block {block_h}x{block_w} does not fit a {h}x{w} image"
            )));
        }
    }
    for (img, m) in out.data_mut().chunks_mut(item).zip(mask.data_mut().chunks_mut(item)) {
        let apply = spec.apply_probability >= 1.0 || rng.bernoulli(spec.apply_probability);
        if !apply {
            continue;
        }
        match spec.kind {
            CorruptionKind::Gaussian { sigma } => {
                if sigma > 0.0 {
                    for v in img.iter_mut() {
                        *v = (*v as f64 + sigma * rng.normal()) as f32;
                    }
                }
            }
            CorruptionKind::BlockMask {
                num_blocks,
                block_h,
                block_w,
            } => {
                for _ in 0..num_blocks {
                    let top = rng.below(h - block_h + 1);
                    let left = rng.below(w - block_w + 1);
                    for ch in 0..c {
                        for y in top..top + block_h {
                            let row = ch * plane + y * w;
                            img[row + left..row + left + block_w].fill(0.0);
                            m[row + left..row + left + block_w].fill(0.0);
                        }
                    }
                }
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "corrupt" });
    }
    Ok((out, mask))
}

/// PSNR of a clean image against itself plus `N(0, sigma²)` noise:
/// `20·log10(255/sigma)`, capped like every other PSNR.
pub fn expected_corrupted_psnr(sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return PSNR_CAP;
    }
    (20.0 * (255.0 / sigma).log10()).min(PSNR_CAP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn image(n: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[n, 3, h, w], |i| (i % 200) as f32 + 10.0).unwrap()
    }

    #[test]
    fn zero_sigma_is_exact() {
        let x = image(2, 8, 8);
        let (y, mask) = corrupt(&x, &CorruptionSpec::gaussian(0.0), &mut Rng::new(1)).unwrap();
        assert_eq!(y, x);
        assert!(mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn full_block_zeroes_everything() {
        let x = image(2, 8, 6);
        let (y, mask) = corrupt(&x, &CorruptionSpec::blocks(1, 8, 6), &mut Rng::new(1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_statistics() {
        let x = Tensor::<f32>::full(&[1, 1, 1000, 1000], 128.0).unwrap();
        let (y, mask) = corrupt(&x, &CorruptionSpec::gaussian(30.0), &mut Rng::new(42)).unwrap();
        let d: Vec<f64> = y.data().iter().map(|&v| v as f64 - 128.0).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!(mean.abs() < 0.2, "{mean}");
        assert!((std - 30.0).abs() < 0.6, "{std}");
        assert!(mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn pure_given_seed() {
        let x = image(3, 9, 9);
        let spec = CorruptionSpec::default_blocks(9, 9);
        let a = corrupt(&x, &spec, &mut Rng::new(5)).unwrap();
        let b = corrupt(&x, &spec, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn expected_psnr() {
        assert!((expected_corrupted_psnr(30.0) - 18.588).abs() < 5e-4);
        assert_eq!(expected_corrupted_psnr(255.0), 0.0);
        assert_eq!(expected_corrupted_psnr(0.0), 99.0);
        assert_eq!(expected_corrupted_psnr(1e-9), 99.0);
    }

    #[test]
    fn default_block_side() {
        assert_eq!(CorruptionSpec::default_blocks(29, 29), CorruptionSpec::blocks(4, 8, 8));
        assert_eq!(CorruptionSpec::default_blocks(32, 30), CorruptionSpec::blocks(4, 8, 8));
    }

    #[test]
    fn parse_and_display() {
        let g = CorruptionSpec::parse("gaussian:30", (29, 29)).unwrap();
        assert_eq!(g.kind.to_string(), "gaussian:30");
        let b = CorruptionSpec::parse("block", (29, 29)).unwrap();
        assert_eq!(b.kind.to_string(), "block:4:8:8");
        assert!(CorruptionSpec::parse("gaussian:-1", (29, 29)).is_err());
        assert!(CorruptionSpec::parse("salt", (29, 29)).is_err());
    }

    #[test]
    fn oversized_block_rejected() {
        let x = image(1, 4, 4);
        assert!(corrupt(&x, &CorruptionSpec::blocks(1, 5, 2), &mut Rng::new(1)).is_err());
    }

    #[test]
    fn probability_zero_leaves_input() {
        let x = image(4, 6, 6);
        let spec = CorruptionSpec::gaussian(30.0).with_probability(0.0);
        assert_eq!(corrupt(&x, &spec, &mut Rng::new(1)).unwrap().0, x);
    }

    #[test]
    fn masked_fraction_bounds() {
        let (h, w) = (29, 29);
        let x = Tensor::<f32>::ones(&[1, 3, h, w]).unwrap();
        let mut rng = Rng::new(77);
        for draw in 0..1000 {
            let n = 1 + draw % 6;
            let (bh, bw) = (1 + draw % 11, 1 + (draw / 3) % 9);
            let (_, mask) = corrupt(&x, &CorruptionSpec::blocks(n, bh, bw), &mut rng).unwrap();
            let zeros = mask.data().iter().filter(|&&m| m == 0.0).count() as f64 / mask.numel() as f64;
            let area = (bh * bw) as f64 / (h * w) as f64;
            assert!(zeros >= area - 1e-12 && zeros <= (n as f64 * area).min(1.0) + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn block_mask_matches_zeroed_pixels(seed in any::<u64>(), n in 0usize..5, side in 1usize..6) {
            let x = image(2, 7, 7);
            let (y, mask) = corrupt(&x, &CorruptionSpec::blocks(n, side, side), &mut Rng::new(seed)).unwrap();
            for ((a, b), m) in x.data().iter().zip(y.data()).zip(mask.data()) {
                prop_assert_eq!(*b, if *m == 0.0 { 0.0 } else { *a });
            }
        }
    }
}
