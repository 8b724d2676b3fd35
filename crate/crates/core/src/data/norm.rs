use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel mean and standard deviation of a training split, in raw
/// pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    /// Population statistics over `(N, H, W)`. A constant channel gets a
    /// standard deviation of 1 so normalization stays finite.
    pub fn from_dataset(train: &Dataset) -> Result<Self> {
        let (mean, var) = train.images.channel_mean_var()?;
        Ok(NormStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var
                .iter()
                .map(|&v| if v > 0.0 { v.sqrt() as f32 } else { 1.0 })
                .collect(),
        })
    }

    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::InvalidArgument("mean and std lengths differ".into()));
        }
        if self.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("normalization std must be positive and finite".into()));
        }
        Ok(())
    }
}

fn per_channel(x: &Tensor<f32>, stats: &NormStats, f: impl Fn(f32, f32, f32) -> f32) -> Result<Tensor<f32>> {
    let (_, c, h, w) = x.dims4()?;
    if c != stats.channels() {
        return Err(Error::ShapeMismatch {
            op: "normalize",
            left: x.shape().to_vec(),
            right: vec![stats.channels()],
        });
    }
    let plane = h * w;
    let mut out = x.clone();
    for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = p % c;
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        for v in chunk {
            *v = f(*v, m, s);
        }
    }
    Ok(out)
}

/// `(x − mean) / std` per channel.
pub fn preprocess(x: &Tensor<f32>, stats: &NormStats) -> Result<Tensor<f32>> {
    per_channel(x, stats, |v, m, s| (v - m) / s)
}

/// Inverse of [`preprocess`].
pub fn deprocess(x: &Tensor<f32>, stats: &NormStats) -> Result<Tensor<f32>> {
    per_channel(x, stats, |v, m, s| v * s + m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn constant_mean_image_maps_to_zero() {
        let stats = NormStats {
            mean: vec![125.3, 123.0, 113.9],
            std: vec![63.0, 62.1, 66.7],
        };
        let x = Tensor::from_fn(&[2, 3, 4, 4], |i| stats.mean[(i / 16) % 3]).unwrap();
        assert!(preprocess(&x, &stats).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip() {
        let x: Tensor<f32> = Rng::new(4).gaussian(&[3, 3, 5, 5], 128.0, 60.0).unwrap();
        let stats = NormStats {
            mean: vec![120.0, 110.0, 100.0],
            std: vec![60.0, 50.0, 40.0],
        };
        let back = deprocess(&preprocess(&x, &stats).unwrap(), &stats).unwrap();
        let worst = x
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| ((a - b) / a.abs().max(1.0)).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn constant_channel_gets_unit_std() {
        let images = Tensor::full(&[4, 1, 2, 2], 7.0).unwrap();
        let d = Dataset::new(images, None, 1).unwrap();
        let s = NormStats::from_dataset(&d).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (7.0, 1.0));
    }
}
