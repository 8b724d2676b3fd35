//! Encoder/decoder execution with symmetric shortcuts.
//!
//! Encoder layer `i` computes `h_i = conv_i(a_{i-1})` and
//! `a_i = relu(bn_i(h_i))`, with `a_0` the input. The decoder walks back
//! from the bottleneck: `d_{D-1} = deconv_D(a_D)`, then for `j < D`
//!
//! ```text
//! z_j = d_j + h_j        (h_j only when junction j carries a shortcut)
//! u_j = relu(bn'_j(z_j))
//! d_{j-1} = deconv_j(u_j)
//! ```
//!
//! so the shortcut is summed before normalization and the non-linearity
//! (pre-activation style). The output is `d_0 + x` with the input→output
//! shortcut, else `d_0`.
//!
//! Named activations recorded in a [`Trace`]: `input`, `enc.{i}.conv`
//! (`h_i`), `enc.{i}.relu` (`a_i`), `dec.{j}.in` (`z_j`), `dec.{j}.relu`
//! (`u_j`), `residual` (`d_0`) and `output` for the auto-encoder;
//! `gap` and `logits` for the classifier head.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::net::checkpoint::Checkpoint;
use crate::net::spec::{Head, LayerGeom, NetworkSpec, KERNEL, PAD};
use crate::net::store::{is_buffer, ParameterStore};
use crate::nn::{self, BnStats, ConvParams, BN_EPS, BN_MOMENTUM};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics everywhere.
    Train,
    /// Encoder runs on running statistics and receives no gradients; the
    /// decoder or head trains normally.
    FrozenEncoder,
    /// Running statistics everywhere; no backward pass.
    Infer,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerGeom>,
    shortcuts: Vec<usize>,
}

/// Activations and normalization statistics of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T: Element> {
    mode: Mode,
    acts: IndexMap<String, Tensor<T>>,
    bn: HashMap<String, BnStats>,
    output: String,
}

impl<T: Element> Trace<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.acts.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.acts
            .get(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.acts.keys().map(String::as_str)
    }

    /// Reconstruction, logits, or the last encoder activation, by head.
    pub fn output(&self) -> &Tensor<T> {
        &self.acts[self.output.as_str()]
    }

    pub fn take(mut self, name: &str) -> Result<Tensor<T>> {
        self.acts
            .shift_remove(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    fn put(&mut self, name: String, t: Tensor<T>) {
        self.acts.insert(name, t);
    }
}

#[derive(Clone, Debug)]
pub struct Gradients<T: Element> {
    /// One entry per trainable tensor, in parameter-store order.
    pub params: ParameterStore<T>,
    /// Gradient with respect to the network input; absent when the encoder
    /// is frozen.
    pub input: Option<Tensor<T>>,
}

pub fn enc(i: usize, part: &str) -> String {
    format!("enc.{i}.{part}")
}

pub fn dec(j: usize, part: &str) -> String {
    format!("dec.{j}.{part}")
}

pub const HEAD_WEIGHT: &str = "head.fc.weight";
pub const HEAD_BIAS: &str = "head.fc.bias";

pub fn build_autoencoder<T: Element>(spec: &NetworkSpec, rng: &mut Rng) -> Result<(Network, ParameterStore<T>)> {
    if spec.head != Head::Autoencoder {
        return Err(Error::InvalidArgument(format!(
            "build_autoencoder needs an autoencoder head, got {}",
            spec.head
        )));
    }
    let net = Network::new(spec.clone())?;
    let store = net.init_params(rng, INIT_STD)?;
    Ok((net, store))
}

/// Classifier with fresh parameters, or with every `enc.*` tensor copied
/// from `init` when given.
pub fn build_classifier<T: Element>(
    spec: &NetworkSpec,
    rng: &mut Rng,
    init: Option<&Checkpoint<T>>,
) -> Result<(Network, ParameterStore<T>)> {
    if !matches!(spec.head, Head::Classifier { .. }) {
        return Err(Error::InvalidArgument(format!(
            "build_classifier needs a classifier head, got {}",
            spec.head
        )));
    }
    let net = Network::new(spec.clone())?;
    let mut store = net.init_params(rng, INIT_STD)?;
    if let Some(ckpt) = init {
        net.load_encoder(&mut store, &ckpt.params)?;
    }
    Ok((net, store))
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let layers = spec.layer_plan()?;
        let shortcuts = spec.shortcut_junctions();
        Ok(Network {
            spec,
            layers,
            shortcuts,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerGeom] {
        &self.layers
    }

    pub fn shortcuts(&self) -> &[usize] {
        &self.shortcuts
    }

    fn has_shortcut(&self, j: usize) -> bool {
        self.shortcuts.contains(&j)
    }

    /// Names of the encoder ReLU activations, shallow to deep.
    pub fn relu_layers(&self) -> Vec<String> {
        (1..=self.depth()).map(|i| enc(i, "relu")).collect()
    }

    /// Activation shape `(C, H, W)` for a probe-able layer name.
    pub fn activation_shape(&self, name: &str) -> Result<[usize; 3]> {
        if name == "input" {
            return Ok(self.spec.input_shape);
        }
        self.relu_index(name).map(|i| self.layers[i - 1].out_shape)
    }

    /// Encoder depth `i` of `enc.{i}.relu`; `input` is depth 0.
    pub fn relu_index(&self, name: &str) -> Result<usize> {
        if name == "input" {
            return Ok(0);
        }
        name.strip_prefix("enc.")
            .and_then(|r| r.strip_suffix(".relu"))
            .and_then(|i| i.parse::<usize>().ok())
            .filter(|&i| (1..=self.depth()).contains(&i))
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Every tensor name and shape, in parameter-store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            let i = l.index;
            let (o, c) = (l.out_shape[0], l.in_shape[0]);
            out.push((enc(i, "conv.weight"), vec![o, c, KERNEL, KERNEL]));
            out.push((enc(i, "conv.bias"), vec![o]));
            for part in ["bn.gamma", "bn.beta", "bn.running_mean", "bn.running_var"] {
                out.push((enc(i, part), vec![o]));
            }
        }
        match self.spec.head {
            Head::Autoencoder => {
                for l in self.layers.iter().rev() {
                    let j = l.index;
                    let (ci, co) = (l.out_shape[0], l.in_shape[0]);
                    if j < self.depth() {
                        for part in ["bn.gamma", "bn.beta", "bn.running_mean", "bn.running_var"] {
                            out.push((dec(j, part), vec![ci]));
                        }
                    }
                    out.push((dec(j, "deconv.weight"), vec![ci, co, KERNEL, KERNEL]));
                    out.push((dec(j, "deconv.bias"), vec![co]));
                }
            }
            Head::Classifier { classes } => {
                let feat = self.layers.last().expect("depth > 0").out_shape[0];
                out.push((HEAD_WEIGHT.to_string(), vec![classes, feat]));
                out.push((HEAD_BIAS.to_string(), vec![classes]));
            }
            Head::None => {}
        }
        out
    }

    /// Weights `N(0, std²)` drawn in store order, biases and `beta` 0,
    /// `gamma` 1, running mean 0, running variance 1.
    pub fn init_params<T: Element>(&self, rng: &mut Rng, std: f64) -> Result<ParameterStore<T>> {
        let mut store = ParameterStore::new();
        for (name, shape) in self.param_shapes() {
            let t = if name.ends_with(".weight") {
                rng.gaussian(&shape, 0.0, std)?
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                Tensor::ones(&shape)?
            } else {
                Tensor::zeros(&shape)?
            };
            store.insert(name, t)?;
        }
        Ok(store)
    }

    /// Checks that `store` holds exactly this network's tensors.
    pub fn check_params<T: Element>(&self, store: &ParameterStore<T>) -> Result<()> {
        let expected = self.param_shapes();
        if expected.len() != store.len() {
            return Err(Error::ParameterMismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                store.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(store.iter()) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::ParameterMismatch(format!(
                    "expected `{name}` {shape:?}, found `{got_name}` {:?}",
                    got.shape()
                )));
            }
        }
        Ok(())
    }

    /// Copies every `enc.*` tensor of `source` into `store`.
    pub fn load_encoder<T: Element>(&self, store: &mut ParameterStore<T>, source: &ParameterStore<T>) -> Result<()> {
        for (name, shape) in self.param_shapes() {
            if !name.starts_with("enc.") {
                continue;
            }
            let src = source.require(&name)?;
            if src.shape() != shape.as_slice() {
                return Err(Error::ParameterMismatch(format!(
                    "`{name}`: checkpoint has {:?}, network needs {shape:?}",
                    src.shape()
                )));
            }
            store.set(name, src.clone());
        }
        Ok(())
    }

    fn check_input<T: Element>(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if [c, h, w] != self.spec.input_shape {
            return Err(Error::ShapeMismatch {
                op: "network input",
                left: x.shape().to_vec(),
                right: self.spec.input_shape.to_vec(),
            });
        }
        Ok(())
    }

    fn conv<'a, T: Element>(store: &'a ParameterStore<T>, prefix: &str, stride: usize) -> Result<ConvParams<'a, T>> {
        Ok(ConvParams {
            weight: store.require(&format!("{prefix}.weight"))?,
            bias: Some(store.require(&format!("{prefix}.bias"))?),
            stride,
            pad: PAD,
        })
    }

    fn bn_relu<T: Element>(
        store: &ParameterStore<T>,
        prefix: &str,
        x: &Tensor<T>,
        train: bool,
        trace: &mut Trace<T>,
    ) -> Result<Tensor<T>> {
        let gamma = store.require(&format!("{prefix}.gamma"))?;
        let beta = store.require(&format!("{prefix}.beta"))?;
        let (mut y, stats) = if train {
            nn::batchnorm_train(x, gamma, beta, BN_EPS)?
        } else {
            let mean = store.require(&format!("{prefix}.running_mean"))?;
            let var = store.require(&format!("{prefix}.running_var"))?;
            nn::batchnorm_infer(x, gamma, beta, mean, var, BN_EPS)?
        };
        nn::relu_in_place(&mut y);
        trace.bn.insert(prefix.to_string(), stats);
        Ok(y)
    }

    pub fn forward<T: Element>(&self, store: &ParameterStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Trace<T>> {
        self.run(store, x, mode, None)
    }

    /// Runs the encoder only as far as activation `stop` (`enc.{i}.relu`
    /// or `input`).
    pub fn forward_until<T: Element>(
        &self,
        store: &ParameterStore<T>,
        x: &Tensor<T>,
        mode: Mode,
        stop: &str,
    ) -> Result<Trace<T>> {
        let depth = self.relu_index(stop)?;
        self.run(store, x, mode, Some(depth))
    }

    fn run<T: Element>(
        &self,
        store: &ParameterStore<T>,
        x: &Tensor<T>,
        mode: Mode,
        stop: Option<usize>,
    ) -> Result<Trace<T>> {
        self.check_input(x)?;
        let mut trace = Trace {
            mode,
            acts: IndexMap::new(),
            bn: HashMap::new(),
            output: "input".to_string(),
        };
        trace.put("input".into(), x.clone());

        let enc_train = mode == Mode::Train;
        let last = stop.unwrap_or(self.depth());
        for l in &self.layers[..last] {
            let i = l.index;
            let prev = if i == 1 { x } else { trace.require(&enc(i - 1, "relu"))? };
            let h = nn::conv2d_forward(prev, &Self::conv(store, &enc(i, "conv"), l.stride)?)?;
            let a = Self::bn_relu(store, &enc(i, "bn"), &h, enc_train, &mut trace)?;
            trace.put(enc(i, "conv"), h);
            trace.put(enc(i, "relu"), a);
            trace.output = enc(i, "relu");
        }
        if stop.is_some() {
            return Ok(trace);
        }

        let depth = self.depth();
        let top = enc(depth, "relu");
        match self.spec.head {
            Head::Autoencoder => {
                let dec_train = mode != Mode::Infer;
                let top_layer = &self.layers[depth - 1];
                let mut stream = nn::deconv2d_forward(
                    trace.require(&top)?,
                    &Self::conv(store, &dec(depth, "deconv"), top_layer.stride)?,
                )?;
                for l in self.layers[..depth - 1].iter().rev() {
                    let j = l.index;
                    let z = if self.has_shortcut(j) {
                        stream.add(trace.require(&enc(j, "conv"))?)?
                    } else {
                        stream
                    };
                    let u = Self::bn_relu(store, &dec(j, "bn"), &z, dec_train, &mut trace)?;
                    stream = nn::deconv2d_forward(&u, &Self::conv(store, &dec(j, "deconv"), l.stride)?)?;
                    trace.put(dec(j, "in"), z);
                    trace.put(dec(j, "relu"), u);
                }
                let output = if self.spec.input_output_shortcut {
                    stream.add(x)?
                } else {
                    stream.clone()
                };
                trace.put("residual".into(), stream);
                trace.put("output".into(), output);
                trace.output = "output".into();
            }
            Head::Classifier { .. } => {
                let pooled = nn::global_avg_pool(trace.require(&top)?)?;
                let logits = nn::linear_forward(&pooled, store.require(HEAD_WEIGHT)?, store.require(HEAD_BIAS)?)?;
                trace.put("gap".into(), pooled);
                trace.put("logits".into(), logits);
                trace.output = "logits".into();
            }
            Head::None => {}
        }
        Ok(trace)
    }

    /// Folds the batch statistics of a training pass into the running
    /// statistics held in `store`.
    pub fn update_running_stats<T: Element>(&self, store: &mut ParameterStore<T>, trace: &Trace<T>) -> Result<()> {
        for (prefix, stats) in &trace.bn {
            if stats.mode != nn::BnMode::Train {
                continue;
            }
            let mut mean = store.require(&format!("{prefix}.running_mean"))?.clone();
            let mut var = store.require(&format!("{prefix}.running_var"))?.clone();
            stats.update_running(&mut mean, &mut var, BN_MOMENTUM);
            store.set(format!("{prefix}.running_mean"), mean);
            store.set(format!("{prefix}.running_var"), var);
        }
        Ok(())
    }

    /// Reverse pass for a loss whose gradient with respect to
    /// [`Trace::output`] is `grad_output`. Gradients from both sides of a
    /// shortcut junction are summed.
    pub fn backward<T: Element>(
        &self,
        store: &ParameterStore<T>,
        trace: &Trace<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Gradients<T>> {
        if trace.mode == Mode::Infer {
            return Err(Error::InvalidArgument("backward needs a training-mode trace".into()));
        }
        trace.output().ensure_same_shape(grad_output, "backward")?;
        let depth = self.depth();
        if trace.get(&enc(depth, "relu")).is_none() {
            return Err(Error::InvalidArgument("backward needs a full forward pass".into()));
        }
        let mut grads: HashMap<String, Tensor<T>> = HashMap::new();
        let mut shortcut_grads: HashMap<usize, Tensor<T>> = HashMap::new();
        let mut input_grad: Option<Tensor<T>> = None;

        let top_grad = match self.spec.head {
            Head::Autoencoder => {
                if self.spec.input_output_shortcut {
                    input_grad = Some(grad_output.clone());
                }
                let mut g_stream = grad_output.clone();
                for l in &self.layers {
                    let j = l.index;
                    let u = if j == depth {
                        trace.require(&enc(depth, "relu"))?
                    } else {
                        trace.require(&dec(j, "relu"))?
                    };
                    let prefix = dec(j, "deconv");
                    let g = nn::deconv2d_backward(u, &Self::conv(store, &prefix, l.stride)?, &g_stream)?;
                    grads.insert(format!("{prefix}.weight"), g.weight);
                    grads.insert(format!("{prefix}.bias"), g.bias);
                    if j == depth {
                        g_stream = g.x;
                        break;
                    }
                    let g_bn = nn::relu_backward(u, &g.x)?;
                    let g_z = self.bn_backward(store, trace, &dec(j, "bn"), trace.require(&dec(j, "in"))?, &g_bn, &mut grads)?;
                    if self.has_shortcut(j) {
                        shortcut_grads.insert(j, g_z.clone());
                    }
                    g_stream = g_z;
                }
                g_stream
            }
            Head::Classifier { .. } => {
                let pooled = trace.require("gap")?;
                let g = nn::linear_backward(pooled, store.require(HEAD_WEIGHT)?, store.require(HEAD_BIAS)?, grad_output)?;
                grads.insert(HEAD_WEIGHT.into(), g.weight);
                grads.insert(HEAD_BIAS.into(), g.bias);
                nn::global_avg_pool_backward(trace.require(&enc(depth, "relu"))?.shape(), &g.x)?
            }
            Head::None => grad_output.clone(),
        };

        if trace.mode == Mode::Train {
            let mut g_a = top_grad;
            for l in self.layers.iter().rev() {
                let i = l.index;
                let a = trace.require(&enc(i, "relu"))?;
                let g_bn = nn::relu_backward(a, &g_a)?;
                let h = trace.require(&enc(i, "conv"))?;
                let mut g_h = self.bn_backward(store, trace, &enc(i, "bn"), h, &g_bn, &mut grads)?;
                if let Some(extra) = shortcut_grads.remove(&i) {
                    g_h.add_assign(&extra)?;
                }
                let prev = if i == 1 { trace.require("input")? } else { trace.require(&enc(i - 1, "relu"))? };
                let prefix = enc(i, "conv");
                let g = nn::conv2d_backward(prev, &Self::conv(store, &prefix, l.stride)?, &g_h)?;
                grads.insert(format!("{prefix}.weight"), g.weight);
                grads.insert(format!("{prefix}.bias"), g.bias);
                g_a = g.x;
            }
            input_grad = Some(match input_grad {
                Some(mut identity) => {
                    identity.add_assign(&g_a)?;
                    identity
                }
                None => g_a,
            });
        } else {
            input_grad = None;
        }

        let mut params = ParameterStore::new();
        for (name, t) in store.iter() {
            if is_buffer(name) {
                continue;
            }
            let g = match grads.remove(name) {
                Some(g) => g,
                None => t.zeros_like(),
            };
            params.insert(name, g)?;
        }
        Ok(Gradients {
            params,
            input: input_grad,
        })
    }

    fn bn_backward<T: Element>(
        &self,
        store: &ParameterStore<T>,
        trace: &Trace<T>,
        prefix: &str,
        x: &Tensor<T>,
        grad: &Tensor<T>,
        grads: &mut HashMap<String, Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let stats = trace
            .bn
            .get(prefix)
            .ok_or_else(|| Error::UnknownLayer(prefix.to_string()))?;
        let gamma = store.require(&format!("{prefix}.gamma"))?;
        let g = nn::batchnorm_backward(x, gamma, stats, BN_EPS, grad)?;
        grads.insert(format!("{prefix}.gamma"), g.gamma);
        grads.insert(format!("{prefix}.beta"), g.beta);
        Ok(g.x)
    }
}
