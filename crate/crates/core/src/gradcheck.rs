//! Central-difference gradient checks for the layer math and for whole
//! networks. Every check reduces the op output to the scalar `Σ out·R`
//! with a fixed random `R`, so the analytic gradient is the backward pass
//! fed with `R`.

use std::fmt;

use crate::error::Result;
use crate::net::{Head, Mode, Network, NetworkSpec, ParameterStore};
use crate::nn::{
    batchnorm_backward, batchnorm_train, conv2d_backward, conv2d_forward, deconv2d_backward,
    deconv2d_forward, global_avg_pool, global_avg_pool_backward, linear_backward, linear_forward,
    relu_backward, relu_forward, softmax_cross_entropy, ConvParams, BN_EPS,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Analytic and numeric values of every checked entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub pairs: Vec<(f64, f64)>,
    /// Entries whose `±STEP` probes moved some ReLU input across zero,
    /// where central differences say nothing about the derivative.
    pub skipped: usize,
}

impl Report {
    pub fn merge(mut self, other: Report) -> Report {
        self.pairs.extend(other.pairs);
        self.skipped += other.skipped;
        self
    }

    pub fn checked(&self) -> usize {
        self.pairs.len()
    }

    /// Denominator floor: `1e-3` of the largest analytic gradient in the
    /// check, at least `1e-6`. Entries whose true gradient is exactly zero
    /// (a bias feeding batch normalization) would otherwise be compared
    /// against pure rounding noise of the loss.
    pub fn floor(&self) -> f64 {
        let scale = self.pairs.iter().map(|p| p.0.abs()).fold(0.0, f64::max);
        (1e-3 * scale).max(1e-6)
    }

    pub fn max_error(&self) -> f64 {
        let floor = self.floor();
        self.pairs
            .iter()
            .map(|&(a, n)| relative_error(a, n, floor))
            .fold(0.0, f64::max)
    }

    /// Below tolerance, with at most 2% of entries skipped.
    pub fn passes(&self) -> bool {
        let checked = self.checked();
        self.max_error() < TOLERANCE && checked > 0 && self.skipped * 50 <= checked + self.skipped
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max rel err {:.2e} over {} entries ({} skipped)",
            self.max_error(),
            self.checked(),
            self.skipped
        )
    }
}

/// Scalar loss at a point plus the sign pattern of every ReLU input.
pub struct Probe {
    pub loss: f64,
    pub pattern: Vec<bool>,
}

impl Probe {
    pub fn smooth(loss: f64) -> Self {
        Probe { loss, pattern: Vec::new() }
    }
}

/// Compares `analytic` against central differences of `eval` at `x`.
pub fn compare(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut eval: impl FnMut(&Tensor<f64>) -> Result<Probe>,
) -> Result<Report> {
    x.ensure_same_shape(analytic, "gradcheck")?;
    let base = eval(x)?.pattern;
    let mut report = Report::default();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - STEP;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if plus.pattern != base || minus.pattern != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * STEP);
        report.pairs.push((analytic.data()[i], numeric));
    }
    Ok(report)
}

fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Result<Tensor<f64>> {
    rng.gaussian(shape, 0.0, std)
}

/// Convolution with a `k×k` kernel, checked in `x`, weight and bias.
pub fn conv(seed: u64, kernel: usize, stride: usize, pad: usize) -> Result<Report> {
    let mut rng = Rng::new(seed);
    let x = gaussian(&mut rng, &[2, 3, 7, 6], 1.0)?;
    let w = gaussian(&mut rng, &[4, 3, kernel, kernel], 0.5)?;
    let b = gaussian(&mut rng, &[4], 0.5)?;
    let forward = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        conv2d_forward(x, &ConvParams { weight: w, bias: Some(b), stride, pad })
    };
    let out = forward(&x, &w, &b)?;
    let r = gaussian(&mut rng, out.shape(), 1.0)?;
    let grads = conv2d_backward(&x, &ConvParams { weight: &w, bias: Some(&b), stride, pad }, &r)?;
    let dx = compare(&x, &grads.x, |x| Ok(Probe::smooth(forward(x, &w, &b)?.dot(&r)?)))?;
    let dw = compare(&w, &grads.weight, |w| Ok(Probe::smooth(forward(&x, w, &b)?.dot(&r)?)))?;
    let db = compare(&b, &grads.bias, |b| Ok(Probe::smooth(forward(&x, &w, b)?.dot(&r)?)))?;
    Ok(dx.merge(dw).merge(db))
}

/// Transposed convolution, checked in `x`, weight and bias.
pub fn deconv(seed: u64, kernel: usize, stride: usize, pad: usize) -> Result<Report> {
    let mut rng = Rng::new(seed);
    let x = gaussian(&mut rng, &[2, 4, 4, 3], 1.0)?;
    let w = gaussian(&mut rng, &[4, 3, kernel, kernel], 0.5)?;
    let b = gaussian(&mut rng, &[3], 0.5)?;
    let forward = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        deconv2d_forward(x, &ConvParams { weight: w, bias: Some(b), stride, pad })
    };
    let out = forward(&x, &w, &b)?;
    let r = gaussian(&mut rng, out.shape(), 1.0)?;
    let grads = deconv2d_backward(&x, &ConvParams { weight: &w, bias: Some(&b), stride, pad }, &r)?;
    let dx = compare(&x, &grads.x, |x| Ok(Probe::smooth(forward(x, &w, &b)?.dot(&r)?)))?;
    let dw = compare(&w, &grads.weight, |w| Ok(Probe::smooth(forward(&x, w, &b)?.dot(&r)?)))?;
    let db = compare(&b, &grads.bias, |b| Ok(Probe::smooth(forward(&x, &w, b)?.dot(&r)?)))?;
    Ok(dx.merge(dw).merge(db))
}

/// Training-mode batch normalization, checked in `x`, gamma and beta.
pub fn batchnorm(seed: u64) -> Result<Report> {
    let mut rng = Rng::new(seed);
    let x = rng.gaussian::<f64>(&[3, 2, 3, 3], 0.5, 2.0)?;
    let mut gamma = gaussian(&mut rng, &[2], 0.5)?;
    gamma.data_mut().iter_mut().for_each(|g| *g += 1.0);
    let beta = gaussian(&mut rng, &[2], 0.5)?;
    let forward = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| -> Result<Tensor<f64>> { Ok(batchnorm_train(x, g, b, BN_EPS)?.0) };
    let (out, stats) = batchnorm_train(&x, &gamma, &beta, BN_EPS)?;
    let r = gaussian(&mut rng, out.shape(), 1.0)?;
    let grads = batchnorm_backward(&x, &gamma, &stats, BN_EPS, &r)?;
    let dx = compare(&x, &grads.x, |x| Ok(Probe::smooth(forward(x, &gamma, &beta)?.dot(&r)?)))?;
    let dg = compare(&gamma, &grads.gamma, |g| Ok(Probe::smooth(forward(&x, g, &beta)?.dot(&r)?)))?;
    let db = compare(&beta, &grads.beta, |b| Ok(Probe::smooth(forward(&x, &gamma, b)?.dot(&r)?)))?;
    Ok(dx.merge(dg).merge(db))
}

/// ReLU away from its kink.
pub fn relu(seed: u64) -> Result<Report> {
    let mut rng = Rng::new(seed);
    let mut x = gaussian(&mut rng, &[2, 3, 4, 4], 1.0)?;
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    let r = gaussian(&mut rng, x.shape(), 1.0)?;
    let grad = relu_backward(&x, &r)?;
    compare(&x, &grad, |x| {
        Ok(Probe {
            loss: relu_forward(x).dot(&r)?,
            pattern: x.data().iter().map(|&v| v > 0.0).collect(),
        })
    })
}

/// Mean softmax cross-entropy in the logits.
pub fn softmax_ce(seed: u64) -> Result<Report> {
    let mut rng = Rng::new(seed);
    let logits = gaussian(&mut rng, &[4, 5], 2.0)?;
    let labels: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
    let (_, grad) = softmax_cross_entropy(&logits, &labels)?;
    compare(&logits, &grad, |l| Ok(Probe::smooth(softmax_cross_entropy(l, &labels)?.0)))
}

/// Global average pooling followed by a linear layer.
pub fn pooled_linear(seed: u64) -> Result<Report> {
    let mut rng = Rng::new(seed);
    let x = gaussian(&mut rng, &[2, 3, 4, 4], 1.0)?;
    let w = gaussian(&mut rng, &[5, 3], 0.5)?;
    let b = gaussian(&mut rng, &[5], 0.5)?;
    let forward = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| linear_forward(&global_avg_pool(x)?, w, b);
    let pooled = global_avg_pool(&x)?;
    let r = gaussian(&mut rng, &[2, 5], 1.0)?;
    let grads = linear_backward(&pooled, &w, &b, &r)?;
    let gx = global_avg_pool_backward(x.shape(), &grads.x)?;
    let dx = compare(&x, &gx, |x| Ok(Probe::smooth(forward(x, &w, &b)?.dot(&r)?)))?;
    let dw = compare(&w, &grads.weight, |w| Ok(Probe::smooth(forward(&x, w, &b)?.dot(&r)?)))?;
    let db = compare(&b, &grads.bias, |b| Ok(Probe::smooth(forward(&x, &w, b)?.dot(&r)?)))?;
    Ok(dx.merge(dw).merge(db))
}

/// Three encoder and three decoder layers with one internal shortcut and
/// the input→output shortcut, on a batch of two 2×7×7 inputs. Checks
/// every trainable tensor and the input.
pub fn toy_network(seed: u64, head: Head) -> Result<Report> {
    let spec = NetworkSpec::from_layer_counts(&[2, 1], 3, [2, 7, 7], head);
    network(&spec, seed)
}

/// Gradient check of a whole network in training mode with randomized
/// parameters.
pub fn network(spec: &NetworkSpec, seed: u64) -> Result<Report> {
    let net = Network::new(spec.clone())?;
    let mut rng = Rng::new(seed);
    let mut store: ParameterStore<f64> = net.init_params(&mut rng, 0.5)?;
    for (name, t) in store.iter_mut() {
        if name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|g| *g = 1.0 + 0.3 * rng.normal());
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|b| *b = 0.3 * rng.normal());
        }
    }
    let [c, h, w] = spec.input_shape;
    let x = gaussian(&mut rng, &[2, c, h, w], 1.0)?;
    let trace = net.forward(&store, &x, Mode::Train)?;
    let r = gaussian(&mut rng, trace.output().shape(), 1.0)?;
    let grads = net.backward(&store, &trace, &r)?;

    let eval = |store: &ParameterStore<f64>, x: &Tensor<f64>| -> Result<Probe> {
        let trace = net.forward(store, x, Mode::Train)?;
        let mut pattern = Vec::new();
        for name in trace.names().filter(|n| n.ends_with(".relu")) {
            pattern.extend(trace.require(name)?.data().iter().map(|&v| v > 0.0));
        }
        Ok(Probe {
            loss: trace.output().dot(&r)?,
            pattern,
        })
    };

    let input_grad = grads.input.as_ref().expect("training mode yields an input gradient");
    let mut report = compare(&x, input_grad, |x| eval(&store, x))?;
    for (name, analytic) in grads.params.iter() {
        let value = store.require(name)?.clone();
        let mut probe_store = store.clone();
        report = report.merge(compare(&value, analytic, |v| {
            probe_store.set(name, v.clone());
            eval(&probe_store, &x)
        })?);
    }
    Ok(report)
}

/// Relative gap between `⟨conv(x), y⟩` and `⟨x, deconv(y)⟩` for a shared
/// weight without bias.
pub fn adjoint_gap(seed: u64, kernel: usize, stride: usize, pad: usize) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let size = stride * 3 + kernel - 2 * pad;
    let x = gaussian(&mut rng, &[2, 3, size, size], 1.0)?;
    let w = gaussian(&mut rng, &[4, 3, kernel, kernel], 1.0)?;
    let p = ConvParams { weight: &w, bias: None, stride, pad };
    let cx = conv2d_forward(&x, &p)?;
    let y = gaussian(&mut rng, cx.shape(), 1.0)?;
    let dy = deconv2d_forward(&y, &p)?;
    let (a, b) = (cx.dot(&y)?, x.dot(&dy)?);
    Ok((a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE))
}
