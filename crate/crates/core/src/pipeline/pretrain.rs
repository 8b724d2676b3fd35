use crate::data::{center_crop, preprocess, Batch, BatchPlan, Batches, CropMode, NormStats};
use crate::error::{Error, Result};
use crate::net::{build_autoencoder, Checkpoint, Head, Mode, Network, ParameterStore};
use crate::nn::mse_backward;
use crate::optim::AdamState;
use crate::report::write_montage;
use crate::rng::{stream, Rng};

use super::{corrupt_opt, diverged, expect_mode, load_data, recon_eval, MetricsRecord, Outputs, RunConfig, RunMode};
use super::HELDOUT_FRACTION;

/// Held-out images shown in `images/recon.ppm`.
const MONTAGE_IMAGES: usize = 4;

/// Trains the auto-encoder to map corrupted images back to clean ones.
///
/// Records the held-out loss and PSNR before training (epoch 0) and after
/// every epoch, saves `best` (highest held-out PSNR) and `final`
/// checkpoints, and returns the final one. On a non-finite loss or
/// gradient the parameters from the start of the failing epoch are saved
/// as `last_good` and the error is returned.
pub fn pretrain(cfg: &RunConfig, out: &mut Outputs) -> Result<Checkpoint> {
    expect_mode(cfg, &[RunMode::Pretrain])?;
    let (all, _) = load_data(cfg)?;
    let (train, heldout) = all.split_tail(HELDOUT_FRACTION)?;
    let norm = NormStats::from_dataset(&train)?;
    let spec = cfg.network_spec(Head::Autoencoder);
    let (net, mut params) = build_autoencoder::<f32>(&spec, &mut Rng::derive(cfg.seed, &[stream::INIT]))?;
    let mut adam = AdamState::new(&params);
    let schedule = cfg.schedule()?;
    let corruption = cfg.corruption();
    let crop = (cfg.crop, cfg.crop);

    let clean = center_crop(&heldout.images, crop)?;
    let noisy = corrupt_opt(&clean, corruption, &mut Rng::derive(cfg.seed, &[stream::EVAL]))?;
    let evaluate = |params: &ParameterStore, keep: usize| {
        recon_eval(&net, params, &norm, &clean, &noisy, cfg.batch_size, keep)
    };

    let (loss, mut best, _) = evaluate(&params, 0)?;
    out.record(MetricsRecord::new(0, "heldout").loss(loss).psnr(best))?;
    out.checkpoint("best", &Checkpoint::new(spec.clone(), params.clone(), norm.clone()))?;

    let plan = BatchPlan {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        shuffle: true,
        hflip: cfg.hflip,
        crop,
        crop_mode: CropMode::Random,
    };
    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr_at(epoch - 1);
        let snapshot = (params.clone(), adam.clone());
        let result = (|| -> Result<(f64, f64, f64)> {
            let mut total = 0.0;
            let mut seen = 0usize;
            for batch in Batches::new(&train, &plan, &norm, epoch - 1)? {
                let batch = batch?;
                let n = batch.indices.len();
                total += train_step(cfg, &net, &mut params, &mut adam, &norm, &batch, epoch, lr)? * n as f64;
                seen += n;
            }
            let (loss, psnr, _) = evaluate(&params, 0)?;
            Ok((total / seen.max(1) as f64, loss, psnr))
        })();
        let (train_loss, loss, psnr) = match result {
            Ok(v) => v,
            Err(err) if diverged(&err) => {
                let mut last = Checkpoint::new(spec.clone(), snapshot.0, norm.clone());
                last.optimizer = Some(snapshot.1);
                out.checkpoint("last_good", &last)?;
                return Err(err);
            }
            Err(err) => return Err(err),
        };
        out.record(MetricsRecord::new(epoch, "train").loss(train_loss).lr(lr))?;
        out.record(MetricsRecord::new(epoch, "heldout").loss(loss).psnr(psnr))?;
        if psnr > best {
            best = psnr;
            out.checkpoint("best", &Checkpoint::new(spec.clone(), params.clone(), norm.clone()))?;
        }
    }

    if let Some(dir) = out.images_dir() {
        let keep = MONTAGE_IMAGES.min(clean.shape()[0]);
        let (_, _, recon) = evaluate(&params, keep)?;
        let rows = (0..keep)
            .map(|i| Ok(vec![clean.item(i)?, noisy.item(i)?, recon[i].clone()]))
            .collect::<Result<Vec<_>>>()?;
        write_montage(&rows, &dir.join("recon.ppm"))?;
    }

    let mut last = Checkpoint::new(spec, params, norm);
    last.optimizer = Some(adam);
    out.checkpoint("final", &last)?;
    Ok(last)
}

/// One optimization step on a batch; returns its loss.
#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &RunConfig,
    net: &Network,
    params: &mut ParameterStore,
    adam: &mut AdamState,
    norm: &NormStats,
    batch: &Batch,
    epoch: usize,
    lr: f64,
) -> Result<f64> {
    let mut rng = Rng::derive(cfg.seed, &[stream::CORRUPT, (epoch - 1) as u64, batch.index as u64]);
    let noisy = corrupt_opt(&batch.raw, cfg.corruption(), &mut rng)?;
    let x = preprocess(&noisy, norm)?;
    let trace = net.forward(params, &x, Mode::Train)?;
    let loss = trace.output().mse(&batch.norm)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            batch: batch.index,
        });
    }
    let grad = mse_backward(trace.output(), &batch.norm)?;
    let grads = net.backward(params, &trace, &grad)?;
    net.update_running_stats(params, &trace)?;
    adam.step(params, &grads.params, lr)?;
    Ok(loss)
}
