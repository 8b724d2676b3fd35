//! Run modes: denoising pre-training, supervised fine-tuning, layer probes
//! and checkpoint evaluation.

mod config;
mod eval;
mod finetune;
mod metrics;
mod pretrain;
mod probe;

use std::ops::Range;

pub use config::{parse_kv, DataSource, EvalTask, RunConfig, RunMode, KEYS};
pub use eval::evaluate;
pub use finetune::finetune;
pub use metrics::{format_g6, MetricsRecord, Outputs, CSV_HEADER};
pub use pretrain::pretrain;
pub use probe::{probe, recon_head_width, ProbePoint, PROBE_CURVE_HEADER};

use crate::corruption::{corrupt, CorruptionSpec};
use crate::data::{
    deprocess, detect_dir, load_cifar_binary, preprocess, synth_dataset, Dataset, NormStats,
};
use crate::error::{Error, Result};
use crate::net::{Checkpoint, Mode, Network, ParameterStore};
use crate::nn::softmax_cross_entropy;
use crate::report::{accuracy, psnr_from_mse};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

/// Share of the training images held out for reconstruction PSNR.
pub const HELDOUT_FRACTION: f64 = 0.05;

/// Train and test splits for `cfg.data`.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synth => {
            let train = synth_dataset(
                &mut Rng::derive(cfg.data_seed, &[stream::SYNTH_TRAIN]),
                cfg.synth_train,
                cfg.classes,
                cfg.synth_size,
            )?;
            let test = synth_dataset(
                &mut Rng::derive(cfg.data_seed, &[stream::SYNTH_TEST]),
                cfg.synth_test,
                cfg.classes,
                cfg.synth_size,
            )?;
            Ok((train, test))
        }
        DataSource::Dir(dir) => {
            let (kind, train, test) = detect_dir(dir)?;
            let train = load_cifar_binary(&train, kind.format())?;
            let test = load_cifar_binary(&test, kind.format())?;
            if train.classes != cfg.classes {
                return Err(Error::config(
                    "classes",
                    format!("{} has {} classes, config says {}", dir.display(), train.classes, cfg.classes),
                ));
            }
            Ok((train, test))
        }
    }
}

/// Loads `cfg.init` and checks that its input matches the configured crop.
pub fn load_init(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg
        .init
        .as_ref()
        .ok_or_else(|| Error::config("init", format!("{} needs a checkpoint", cfg.mode.as_str())))?;
    let ckpt = Checkpoint::load(path)?;
    let want = [3, cfg.crop, cfg.crop];
    if ckpt.spec.input_shape != want {
        return Err(Error::config(
            "crop",
            format!(
                "checkpoint expects {:?} input, config gives {:?}",
                ckpt.spec.input_shape, want
            ),
        ));
    }
    Ok(ckpt)
}

fn expect_mode(cfg: &RunConfig, modes: &[RunMode]) -> Result<()> {
    if modes.contains(&cfg.mode) {
        Ok(())
    } else {
        Err(Error::config("mode", format!("`{}` cannot run here", cfg.mode.as_str())))
    }
}

/// Training has blown up rather than failed for an external reason.
fn diverged(err: &Error) -> bool {
    matches!(
        err,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. }
    )
}

fn chunks(n: usize, size: usize) -> impl Iterator<Item = Range<usize>> {
    (0..n).step_by(size.max(1)).map(move |s| s..(s + size.max(1)).min(n))
}

fn take(t: &Tensor<f32>, range: Range<usize>) -> Result<Tensor<f32>> {
    t.select(&range.collect::<Vec<_>>())
}

fn corrupt_opt(batch: &Tensor<f32>, spec: Option<CorruptionSpec>, rng: &mut Rng) -> Result<Tensor<f32>> {
    match spec {
        Some(spec) => Ok(corrupt(batch, &spec, rng)?.0),
        None => Ok(batch.clone()),
    }
}

/// Normalized-domain MSE and raw-domain PSNR of reconstructing `clean`
/// from `noisy`, both raw pixels, plus the raw reconstruction of the
/// first `keep` images.
fn recon_eval(
    net: &Network,
    params: &ParameterStore,
    norm: &NormStats,
    clean: &Tensor<f32>,
    noisy: &Tensor<f32>,
    batch_size: usize,
    keep: usize,
) -> Result<(f64, f64, Vec<Tensor<f32>>)> {
    let n = clean.shape()[0];
    let (mut loss, mut sse, mut count) = (0.0, 0.0, 0usize);
    let mut kept = Vec::new();
    for range in chunks(n, batch_size) {
        let clean_raw = take(clean, range.clone())?;
        let x = preprocess(&take(noisy, range.clone())?, norm)?;
        let out = net.forward(params, &x, Mode::Infer)?.take("output")?;
        loss += out.mse(&preprocess(&clean_raw, norm)?)? * out.numel() as f64;
        let raw = deprocess(&out, norm)?;
        sse += raw.mse(&clean_raw)? * raw.numel() as f64;
        count += raw.numel();
        for i in 0..range.len() {
            if kept.len() < keep {
                kept.push(raw.item(i)?);
            }
        }
    }
    let (loss, mse) = (loss / count as f64, sse / count as f64);
    if !(loss.is_finite() && mse.is_finite()) {
        return Err(Error::NonFinite { op: "reconstruction eval" });
    }
    Ok((loss, psnr_from_mse(mse), kept))
}

/// Mean cross-entropy and top-1 accuracy on already cropped raw images.
fn cls_eval(
    net: &Network,
    params: &ParameterStore,
    norm: &NormStats,
    images: &Tensor<f32>,
    labels: &[usize],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let n = images.shape()[0];
    let (mut loss, mut hits) = (0.0, 0.0);
    for range in chunks(n, batch_size) {
        let x = preprocess(&take(images, range.clone())?, norm)?;
        let logits = net.forward(params, &x, Mode::Infer)?.take("logits")?;
        let y = &labels[range.clone()];
        loss += softmax_cross_entropy(&logits, y)?.0 * y.len() as f64;
        hits += accuracy(&logits, y)? * y.len() as f64;
    }
    Ok((loss / n as f64, hits / n as f64))
}

/// Runs `cfg.mode`, writing into `out`.
pub fn run(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    match cfg.mode {
        RunMode::Pretrain => pretrain(cfg, out).map(drop),
        RunMode::Finetune => finetune(cfg, out).map(drop),
        RunMode::ProbeCls | RunMode::ProbeRecon => probe(cfg, out).map(drop),
        RunMode::Eval => evaluate(cfg, out).map(drop),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_ranges() {
        let r: Vec<_> = chunks(7, 3).collect();
        assert_eq!(r, vec![0..3, 3..6, 6..7]);
        assert_eq!(chunks(0, 3).count(), 0);
    }

    #[test]
    fn synthetic_splits_are_reproducible() {
        let cfg = RunConfig::parse("mode=pretrain\nsynth_train=20\nsynth_test=10").unwrap();
        let (a, t) = load_data(&cfg).unwrap();
        let (b, _) = load_data(&cfg).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!((a.len(), t.len()), (20, 10));
        assert_ne!(a.images.item(0).unwrap(), t.images.item(0).unwrap());
    }
}
