use crate::data::{center_crop, deprocess, preprocess, BatchPlan, Batches, CropMode, Dataset};
use crate::error::{Error, Result};
use crate::net::{Checkpoint, Mode, Network, ParameterStore, PAD};
use crate::nn::{self, mse_backward, softmax_cross_entropy, ConvParams};
use crate::optim::{AdamState, LrSchedule};
use crate::report::{accuracy, psnr_from_mse};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

use super::{chunks, expect_mode, format_g6, load_data, load_init, take, MetricsRecord, Outputs, RunConfig, RunMode};

pub const PROBE_CURVE_HEADER: &str = "layer,depth,kind,value";

/// Final test metric of one probe head.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbePoint {
    pub layer: String,
    /// Encoder layers below the probed activation; 0 for the input.
    pub depth: usize,
    /// `accuracy` or `psnr`.
    pub kind: &'static str,
    pub value: f64,
    pub loss: f64,
}

impl ProbePoint {
    fn csv(&self) -> String {
        format!("{},{},{},{}", self.layer, self.depth, self.kind, format_g6(self.value))
    }
}

/// Trains a head on frozen encoder features of every requested layer and
/// reports its test metric: a softmax regression for `probe_cls`, a small
/// deconvolution stack rebuilding the clean input for `probe_recon`.
///
/// `layer=all` probes every encoder ReLU; `input` probes the raw image.
/// Writes one `probe:<layer>` record per layer and `probe_curve.csv`.
pub fn probe(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<ProbePoint>> {
    expect_mode(cfg, &[RunMode::ProbeCls, RunMode::ProbeRecon])?;
    let ckpt = load_init(cfg)?;
    let net = Network::new(ckpt.spec.clone())?;
    let layers = if cfg.layer == "all" {
        net.relu_layers()
    } else {
        net.relu_index(&cfg.layer)?;
        vec![cfg.layer.clone()]
    };

    let (all, test) = load_data(cfg)?;
    let train = match cfg.label_budget {
        Some(budget) => {
            let idx = all.balanced_indices(budget, &mut Rng::derive(cfg.seed, &[stream::LABELS]))?;
            all.subset(&idx)?
        }
        None => all,
    };
    let task = Task {
        cfg,
        ckpt: &ckpt,
        net: &net,
        train: &train,
        test: &test,
        schedule: cfg.schedule()?,
    };

    let mut points = Vec::with_capacity(layers.len());
    let mut curve = format!("{PROBE_CURVE_HEADER}\n");
    for layer in &layers {
        let point = match cfg.mode {
            RunMode::ProbeCls => task.classify(layer)?,
            _ => task.reconstruct(layer)?,
        };
        let mut rec = MetricsRecord::new(cfg.epochs, format!("probe:{layer}")).loss(point.loss);
        rec = match point.kind {
            "accuracy" => rec.accuracy(point.value),
            _ => rec.psnr(point.value),
        };
        out.record(rec)?;
        curve.push_str(&point.csv());
        curve.push('\n');
        points.push(point);
    }
    out.write_file("probe_curve.csv", &curve)?;
    Ok(points)
}

struct Task<'a> {
    cfg: &'a RunConfig,
    ckpt: &'a Checkpoint,
    net: &'a Network,
    train: &'a Dataset,
    test: &'a Dataset,
    schedule: LrSchedule,
}

/// Head weights and how to run them.
trait ProbeHead {
    fn params(&mut self) -> &mut ParameterStore;
    /// Loss and gradient for one batch, applying no update.
    fn loss_grad(&self, feats: &Tensor<f32>, target: &Target<'_>) -> Result<(f64, ParameterStore)>;
}

enum Target<'a> {
    Labels(&'a [usize]),
    Image(&'a Tensor<f32>),
}

impl Task<'_> {
    fn features(&self, layer: &str, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.net
            .forward_until(&self.ckpt.params, x, Mode::Infer, layer)?
            .take(layer)
    }

    fn plan(&self) -> BatchPlan {
        BatchPlan {
            batch_size: self.cfg.batch_size,
            seed: self.cfg.seed,
            shuffle: true,
            hflip: false,
            crop: (self.cfg.crop, self.cfg.crop),
            crop_mode: CropMode::Center,
        }
    }

    fn fit(&self, layer: &str, head: &mut dyn ProbeHead) -> Result<()> {
        let plan = self.plan();
        let mut adam = AdamState::new(head.params());
        for epoch in 0..self.cfg.epochs {
            let lr = self.schedule.lr_at(epoch);
            for batch in Batches::new(self.train, &plan, &self.ckpt.norm, epoch)? {
                let batch = batch?;
                let feats = self.features(layer, &batch.norm)?;
                let target = match &batch.labels {
                    Some(l) if matches!(self.cfg.mode, RunMode::ProbeCls) => Target::Labels(l),
                    _ => Target::Image(&batch.norm),
                };
                let (loss, grads) = head.loss_grad(&feats, &target)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: epoch + 1,
                        batch: batch.index,
                    });
                }
                adam.step(head.params(), &grads, lr)?;
            }
        }
        Ok(())
    }

    fn classify(&self, layer: &str) -> Result<ProbePoint> {
        let depth = self.net.relu_index(layer)?;
        let [c, h, w] = self.net.activation_shape(layer)?;
        let classes = self.train.classes;
        let mut rng = Rng::derive(self.cfg.seed, &[stream::HEAD, depth as u64]);
        let mut head = Linear {
            params: ParameterStore::new(),
        };
        head.params
            .insert("probe.weight", rng.gaussian(&[classes, c * h * w], 0.0, crate::net::INIT_STD)?)?;
        head.params.insert("probe.bias", Tensor::zeros(&[classes])?)?;
        self.fit(layer, &mut head)?;

        let labels = self
            .test
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("test split has no labels".into()))?;
        let images = center_crop(&self.test.images, (self.cfg.crop, self.cfg.crop))?;
        let (mut loss, mut hits) = (0.0, 0.0);
        for range in chunks(images.shape()[0], self.cfg.batch_size) {
            let x = preprocess(&take(&images, range.clone())?, &self.ckpt.norm)?;
            let logits = head.logits(&self.features(layer, &x)?)?;
            let y = &labels[range];
            loss += softmax_cross_entropy(&logits, y)?.0 * y.len() as f64;
            hits += accuracy(&logits, y)? * y.len() as f64;
        }
        let n = labels.len() as f64;
        Ok(ProbePoint {
            layer: layer.to_string(),
            depth,
            kind: "accuracy",
            value: hits / n,
            loss: loss / n,
        })
    }

    fn reconstruct(&self, layer: &str) -> Result<ProbePoint> {
        let depth = self.net.relu_index(layer)?;
        let strides: Vec<usize> = self.net.layers()[..depth].iter().map(|l| l.stride).collect();
        let [c, ..] = self.net.activation_shape(layer)?;
        let first = self.net.activation_shape(&self.net.relu_layers()[0])?[0];
        let image_c = self.ckpt.spec.input_shape[0];
        let ups = strides.iter().filter(|&&s| s > 1).count();
        let plan: Vec<usize> = if ups == 0 { vec![1] } else { vec![2; ups] };
        let width = recon_head_width(c, image_c, plan.len(), first * image_c * 9);
        let mut rng = Rng::derive(self.cfg.seed, &[stream::HEAD, depth as u64]);
        let mut head = DeconvStack {
            strides: plan.clone(),
            params: ParameterStore::new(),
        };
        for (l, _) in plan.iter().enumerate() {
            let cin = if l == 0 { c } else { width };
            let cout = if l + 1 == plan.len() { image_c } else { width };
            head.params.insert(
                format!("probe.{l}.weight"),
                rng.gaussian(&[cin, cout, 3, 3], 0.0, crate::net::INIT_STD)?,
            )?;
            head.params.insert(format!("probe.{l}.bias"), Tensor::zeros(&[cout])?)?;
        }
        let probe_in = self.features(layer, &Tensor::zeros(&[1, image_c, self.cfg.crop, self.cfg.crop])?)?;
        let shape = head.forward(&probe_in)?.last().map(|t| t.shape().to_vec()).unwrap_or_default();
        if shape[1..] != [image_c, self.cfg.crop, self.cfg.crop] {
            return Err(Error::Geometry(format!(
                "probe head on `{layer}` produces {shape:?}, not a {}x{} image",
                self.cfg.crop, self.cfg.crop
            )));
        }
        self.fit(layer, &mut head)?;

        let clean = center_crop(&self.test.images, (self.cfg.crop, self.cfg.crop))?;
        let (mut loss, mut sse, mut count) = (0.0, 0.0, 0usize);
        for range in chunks(clean.shape()[0], self.cfg.batch_size) {
            let raw = take(&clean, range)?;
            let x = preprocess(&raw, &self.ckpt.norm)?;
            let acts = head.forward(&self.features(layer, &x)?)?;
            let y = acts.last().expect("head has layers");
            loss += y.mse(&x)? * y.numel() as f64;
            sse += deprocess(y, &self.ckpt.norm)?.mse(&raw)? * y.numel() as f64;
            count += y.numel();
        }
        Ok(ProbePoint {
            layer: layer.to_string(),
            depth,
            kind: "psnr",
            value: psnr_from_mse(sse / count as f64),
            loss: loss / count as f64,
        })
    }
}

/// Hidden width of a `layers`-deep 3×3 deconvolution head from
/// `in_channels` to `out_channels` whose weight count stays within
/// `budget`; at least 1. Single-layer heads have no hidden width.
pub fn recon_head_width(in_channels: usize, out_channels: usize, layers: usize, budget: usize) -> usize {
    if layers < 2 {
        return 0;
    }
    let weights = |w: usize| 9 * (in_channels * w + (layers - 2) * w * w + w * out_channels);
    let mut w = 1;
    while weights(w + 1) <= budget {
        w += 1;
    }
    w
}

struct Linear {
    params: ParameterStore,
}

impl Linear {
    fn logits(&self, feats: &Tensor<f32>) -> Result<Tensor<f32>> {
        nn::linear_forward(feats, self.params.require("probe.weight")?, self.params.require("probe.bias")?)
    }
}

impl ProbeHead for Linear {
    fn params(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn loss_grad(&self, feats: &Tensor<f32>, target: &Target<'_>) -> Result<(f64, ParameterStore)> {
        let Target::Labels(labels) = target else {
            return Err(Error::InvalidArgument("classification probe needs labels".into()));
        };
        let (loss, grad) = softmax_cross_entropy(&self.logits(feats)?, labels)?;
        let g = nn::linear_backward(
            feats,
            self.params.require("probe.weight")?,
            self.params.require("probe.bias")?,
            &grad,
        )?;
        let mut grads = ParameterStore::new();
        grads.insert("probe.weight", g.weight)?;
        grads.insert("probe.bias", g.bias)?;
        Ok((loss, grads))
    }
}

/// Deconvolutions with ReLU between them; the last layer is linear.
struct DeconvStack {
    strides: Vec<usize>,
    params: ParameterStore,
}

impl DeconvStack {
    fn layer(&self, l: usize) -> Result<ConvParams<'_, f32>> {
        Ok(ConvParams {
            weight: self.params.require(&format!("probe.{l}.weight"))?,
            bias: Some(self.params.require(&format!("probe.{l}.bias"))?),
            stride: self.strides[l],
            pad: PAD,
        })
    }

    /// Input followed by each layer's output.
    fn forward(&self, feats: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let mut acts = vec![feats.clone()];
        for l in 0..self.strides.len() {
            let mut y = nn::deconv2d_forward(&acts[l], &self.layer(l)?)?;
            if l + 1 < self.strides.len() {
                nn::relu_in_place(&mut y);
            }
            acts.push(y);
        }
        Ok(acts)
    }
}

impl ProbeHead for DeconvStack {
    fn params(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn loss_grad(&self, feats: &Tensor<f32>, target: &Target<'_>) -> Result<(f64, ParameterStore)> {
        let Target::Image(image) = target else {
            return Err(Error::InvalidArgument("reconstruction probe needs images".into()));
        };
        let acts = self.forward(feats)?;
        let y = acts.last().expect("head has layers");
        let loss = y.mse(image)?;
        let mut g = mse_backward(y, image)?;
        let mut grads = Vec::new();
        for l in (0..self.strides.len()).rev() {
            let gl = nn::deconv2d_backward(&acts[l], &self.layer(l)?, &g)?;
            grads.push((l, gl.weight, gl.bias));
            if l > 0 {
                g = nn::relu_backward(&acts[l], &gl.x)?;
            }
        }
        let mut store = ParameterStore::new();
        for (l, w, b) in grads.into_iter().rev() {
            store.insert(format!("probe.{l}.weight"), w)?;
            store.insert(format!("probe.{l}.bias"), b)?;
        }
        Ok((loss, store))
    }
}
