//! Per-channel batch normalization over `(N, H, W)`.
//!
//! Training mode normalizes with the biased batch variance and reports the
//! batch statistics; running statistics move as
//! `new = momentum·old + (1 − momentum)·batch` and store the biased value.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Owned batch-norm layer state.
#[derive(Clone, Debug)]
pub struct BatchNormParams<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// `None` until the layer has running statistics to normalize with.
    pub running: Option<RunningStats<T>>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug)]
pub struct RunningStats<T: Element> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Statistics a normalization used, kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased variance of the batch, or the running variance in infer mode.
    pub var: Vec<f64>,
    pub mode: BnMode,
}

impl BnStats {
    fn inv_std(&self, eps: f64) -> Vec<f64> {
        self.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect()
    }

    /// Folds batch statistics into running statistics.
    pub fn update_running<T: Element>(
        &self,
        mean: &mut Tensor<T>,
        var: &mut Tensor<T>,
        momentum: f64,
    ) {
        debug_assert_eq!(self.mode, BnMode::Train);
        for (r, &b) in mean.data_mut().iter_mut().zip(&self.mean) {
            *r = T::from_f64(momentum * r.as_f64() + (1.0 - momentum) * b);
        }
        for (r, &b) in var.data_mut().iter_mut().zip(&self.var) {
            *r = T::from_f64(momentum * r.as_f64() + (1.0 - momentum) * b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnGrads<T: Element> {
    pub x: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Element> BatchNormParams<T> {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNormParams {
            gamma: Tensor::ones(&[channels])?,
            beta: Tensor::zeros(&[channels])?,
            running: Some(RunningStats {
                mean: Tensor::zeros(&[channels])?,
                var: Tensor::ones(&[channels])?,
            }),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    /// Runs the layer; train mode also updates the running statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, BnStats)> {
        match mode {
            BnMode::Train => {
                let (y, stats) = batchnorm_train(x, &self.gamma, &self.beta, self.eps)?;
                if let Some(r) = self.running.as_mut() {
                    stats.update_running(&mut r.mean, &mut r.var, self.momentum);
                }
                Ok((y, stats))
            }
            BnMode::Infer => {
                let r = self.running.as_ref().ok_or(Error::UninitializedRunningStats)?;
                batchnorm_infer(x, &self.gamma, &self.beta, &r.mean, &r.var, self.eps)
            }
        }
    }

    pub fn backward(&self, x: &Tensor<T>, stats: &BnStats, grad_out: &Tensor<T>) -> Result<BnGrads<T>> {
        batchnorm_backward(x, &self.gamma, stats, self.eps, grad_out)
    }
}

fn check_channels<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let (_, c, _, _) = x.dims4()?;
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                left: x.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    Ok(c)
}

fn normalize<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &BnStats,
    eps: f64,
) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv_std = stats.inv_std(eps);
    let mut out = x.zeros_like();
    for (i, (src, dst)) in x
        .data()
        .chunks_exact(plane)
        .zip(out.data_mut().chunks_exact_mut(plane))
        .enumerate()
    {
        let ch = i % c;
        let scale = gamma.data()[ch].as_f64() * inv_std[ch];
        let shift = beta.data()[ch].as_f64() - stats.mean[ch] * scale;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = T::from_f64(s.as_f64() * scale + shift);
        }
    }
    Ok(out)
}

pub fn batchnorm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnStats)> {
    check_channels(x, gamma, beta)?;
    let (mean, var) = x.channel_mean_var()?;
    let stats = BnStats {
        mean,
        var,
        mode: BnMode::Train,
    };
    Ok((normalize(x, gamma, beta, &stats, eps)?, stats))
}

pub fn batchnorm_infer<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnStats)> {
    let c = check_channels(x, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm running stats",
            left: running_mean.shape().to_vec(),
            right: vec![c],
        });
    }
    let stats = BnStats {
        mean: running_mean.data().iter().map(|v| v.as_f64()).collect(),
        var: running_var.data().iter().map(|v| v.as_f64()).collect(),
        mode: BnMode::Infer,
    };
    Ok((normalize(x, gamma, beta, &stats, eps)?, stats))
}

/// Gradients of either mode. In train mode the statistics depend on `x`,
/// in infer mode the layer is affine in `x`.
pub fn batchnorm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BnStats,
    eps: f64,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    x.ensure_same_shape(grad_out, "batchnorm_backward")?;
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm_backward",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let plane = h * w;
    let count = (n * plane) as f64;
    let inv_std = stats.inv_std(eps);

    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for (i, (xs, gs)) in x
        .data()
        .chunks_exact(plane)
        .zip(grad_out.data().chunks_exact(plane))
        .enumerate()
    {
        let ch = i % c;
        for (&xv, &gv) in xs.iter().zip(gs) {
            let g = gv.as_f64();
            sum_g[ch] += g;
            sum_gx[ch] += g * (xv.as_f64() - stats.mean[ch]) * inv_std[ch];
        }
    }

    let mut grad_x = x.zeros_like();
    for (i, ((xs, gs), dst)) in x
        .data()
        .chunks_exact(plane)
        .zip(grad_out.data().chunks_exact(plane))
        .zip(grad_x.data_mut().chunks_exact_mut(plane))
        .enumerate()
    {
        let ch = i % c;
        let k = gamma.data()[ch].as_f64() * inv_std[ch];
        match stats.mode {
            BnMode::Train => {
                let mg = sum_g[ch] / count;
                let mgx = sum_gx[ch] / count;
                for ((d, &xv), &gv) in dst.iter_mut().zip(xs).zip(gs) {
                    let xhat = (xv.as_f64() - stats.mean[ch]) * inv_std[ch];
                    *d = T::from_f64(k * (gv.as_f64() - mg - xhat * mgx));
                }
            }
            BnMode::Infer => {
                for (d, &gv) in dst.iter_mut().zip(gs) {
                    *d = T::from_f64(k * gv.as_f64());
                }
            }
        }
    }
    let to_tensor = |v: Vec<f64>| Tensor::new(&[c], v.into_iter().map(T::from_f64).collect());
    Ok(BnGrads {
        x: grad_x,
        gamma: to_tensor(sum_gx)?,
        beta: to_tensor(sum_g)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn train_output_is_standardized() {
        let mut rng = Rng::new(1);
        let x: Tensor<f32> = rng.gaussian(&[8, 3, 5, 5], 4.0, 3.0).unwrap();
        let mut bn = BatchNormParams::new(3).unwrap();
        let (y, _) = bn.forward(&x, BnMode::Train).unwrap();
        let (mean, var) = y.channel_mean_var().unwrap();
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-5, "mean {}", mean[c]);
            assert!((var[c] - 1.0).abs() < 1e-3, "var {}", var[c]);
        }
    }

    #[test]
    fn affine_after_normalization() {
        let mut rng = Rng::new(2);
        let x: Tensor<f64> = rng.gaussian(&[8, 2, 4, 4], -1.0, 2.0).unwrap();
        let mut bn = BatchNormParams::new(2).unwrap();
        bn.gamma.fill(2.0);
        bn.beta.fill(3.0);
        let (y, _) = bn.forward(&x, BnMode::Train).unwrap();
        let (mean, var) = y.channel_mean_var().unwrap();
        for c in 0..2 {
            assert!((mean[c] - 3.0).abs() < 1e-9);
            assert!((var[c] - 4.0).abs() < 1e-3);
        }
    }

    #[test]
    fn running_stats_update() {
        let x = Tensor::<f64>::new(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut bn = BatchNormParams::new(1).unwrap();
        bn.forward(&x, BnMode::Train).unwrap();
        let r = bn.running.as_ref().unwrap();
        // batch mean 4, biased var 5
        assert!((r.mean.data()[0] - 0.4).abs() < 1e-12);
        assert!((r.var.data()[0] - (0.9 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn infer_needs_running_stats() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2]).unwrap();
        let mut bn = BatchNormParams::new(2).unwrap();
        bn.running = None;
        assert!(matches!(
            bn.forward(&x, BnMode::Infer),
            Err(Error::UninitializedRunningStats)
        ));
    }

    #[test]
    fn infer_is_pure() {
        let mut rng = Rng::new(3);
        let x: Tensor<f32> = rng.gaussian(&[2, 2, 3, 3], 0.0, 1.0).unwrap();
        let mut bn = BatchNormParams::new(2).unwrap();
        let (a, _) = bn.forward(&x, BnMode::Infer).unwrap();
        let (b, _) = bn.forward(&x, BnMode::Infer).unwrap();
        assert_eq!(a, b);
        assert_eq!(bn.running.as_ref().unwrap().mean.data(), &[0.0, 0.0]);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2]).unwrap();
        let mut bn = BatchNormParams::new(3).unwrap();
        assert!(bn.forward(&x, BnMode::Train).is_err());
    }
}
