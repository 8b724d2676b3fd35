use crate::data::{center_crop, preprocess, BatchPlan, Batches, CropMode, NormStats};
use crate::error::{Error, Result};
use crate::net::{build_classifier, Checkpoint, Head, Mode};
use crate::nn::softmax_cross_entropy;
use crate::optim::AdamState;
use crate::rng::{stream, Rng};

use super::{cls_eval, diverged, expect_mode, load_data, load_init, MetricsRecord, Outputs, RunConfig, RunMode};

/// Trains the classifier with cross-entropy, optionally starting from a
/// pre-trained encoder (`init`) on a class-balanced `label_budget` subset.
///
/// During the first `freeze_epochs` epochs the encoder runs on its running
/// statistics and receives no updates. Each epoch records the train loss
/// and the test loss and accuracy on center crops; epoch 0 is the
/// untrained model.
pub fn finetune(cfg: &RunConfig, out: &mut Outputs) -> Result<Checkpoint> {
    expect_mode(cfg, &[RunMode::Finetune])?;
    let (all, test) = load_data(cfg)?;
    let spec = cfg.network_spec(Head::Classifier { classes: cfg.classes });
    let init = match cfg.init {
        Some(_) => {
            let ckpt = load_init(cfg)?;
            if ckpt.spec.stages != spec.stages {
                return Err(Error::config("init", "checkpoint encoder does not match `net` and `width`"));
            }
            Some(ckpt)
        }
        None => None,
    };
    let norm = match &init {
        Some(ckpt) => ckpt.norm.clone(),
        None => NormStats::from_dataset(&all)?,
    };
    let train = match cfg.label_budget {
        Some(budget) => {
            let idx = all.balanced_indices(budget, &mut Rng::derive(cfg.seed, &[stream::LABELS]))?;
            all.subset(&idx)?
        }
        None => all,
    };
    let test_labels = test
        .labels
        .clone()
        .ok_or_else(|| Error::Data("test split has no labels".into()))?;
    if train.labels.is_none() {
        return Err(Error::Data("training split has no labels".into()));
    }

    let (net, mut params) = build_classifier(&spec, &mut Rng::derive(cfg.seed, &[stream::INIT]), init.as_ref())?;
    let mut adam = AdamState::new(&params);
    let schedule = cfg.schedule()?;
    let crop = (cfg.crop, cfg.crop);
    let corruption = match cfg.corruption() {
        Some(c) if cfg.corrupt_prob > 0.0 => Some(c.with_probability(cfg.corrupt_prob)),
        _ => None,
    };
    let test_images = center_crop(&test.images, crop)?;
    let evaluate = |params: &_| cls_eval(&net, params, &norm, &test_images, &test_labels, cfg.batch_size);

    let (loss, mut best) = evaluate(&params)?;
    out.record(MetricsRecord::new(0, "test").loss(loss).accuracy(best))?;
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
        let mode = if epoch <= cfg.freeze_epochs { Mode::FrozenEncoder } else { Mode::Train };
        let snapshot = (params.clone(), adam.clone());
        let result = (|| -> Result<(f64, f64, f64)> {
            let (mut total, mut seen) = (0.0, 0usize);
            for batch in Batches::new(&train, &plan, &norm, epoch - 1)? {
                let batch = batch?;
                let labels = batch.labels.as_deref().expect("labelled split");
                let x = match corruption {
                    Some(spec) => {
                        let mut rng = Rng::derive(cfg.seed, &[stream::CORRUPT, (epoch - 1) as u64, batch.index as u64]);
                        preprocess(&crate::corruption::corrupt(&batch.raw, &spec, &mut rng)?.0, &norm)?
                    }
                    None => batch.norm.clone(),
                };
                let trace = net.forward(&params, &x, mode)?;
                let (loss, grad) = softmax_cross_entropy(trace.output(), labels)
                    .map_err(|e| match e {
                        Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch: batch.index },
                        e => e,
                    })?;
                let grads = net.backward(&params, &trace, &grad)?;
                net.update_running_stats(&mut params, &trace)?;
                adam.step(&mut params, &grads.params, lr)?;
                total += loss * labels.len() as f64;
                seen += labels.len();
            }
            let (loss, acc) = evaluate(&params)?;
            Ok((total / seen.max(1) as f64, loss, acc))
        })();
        let (train_loss, loss, acc) = match result {
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
        out.record(MetricsRecord::new(epoch, "test").loss(loss).accuracy(acc))?;
        if acc > best {
            best = acc;
            out.checkpoint("best", &Checkpoint::new(spec.clone(), params.clone(), norm.clone()))?;
        }
    }

    let mut last = Checkpoint::new(spec, params, norm);
    last.optimizer = Some(adam);
    out.checkpoint("final", &last)?;
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::enc;
    use crate::pipeline::pretrain;

    const TINY: &str = "synth_train=60\nsynth_test=40\nsynth_size=12\ncrop=11\nnet=1,1\nwidth=4\nbatch_size=16\nclasses=4\n";

    fn cfg(extra: &str) -> RunConfig {
        RunConfig::parse(&format!("mode=finetune\n{TINY}{extra}")).unwrap()
    }

    #[test]
    fn untrained_records_epoch_zero_only() {
        let mut out = Outputs::memory();
        finetune(&cfg("epochs=0"), &mut out).unwrap();
        assert_eq!(out.records().len(), 1);
        let acc = out.records()[0].accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn freeze_phase_keeps_encoder() {
        let tmp = tempfile::tempdir().unwrap();
        let pre = RunConfig::parse(&format!("mode=pretrain\n{TINY}epochs=1")).unwrap();
        let mut out = Outputs::create(&tmp.path().join("pre"), &pre).unwrap();
        let init = pretrain(&pre, &mut out).unwrap();
        let path = tmp.path().join("pre/checkpoints/final.scae");

        let ft = cfg(&format!("epochs=2\nfreeze_epochs=2\ninit={}", path.display()));
        let tuned = finetune(&ft, &mut Outputs::memory()).unwrap();
        for (name, t) in tuned.params.iter().filter(|(n, _)| n.starts_with("enc.")) {
            let before = init.params.get(name).unwrap();
            assert_eq!(t.data(), before.data(), "{name}");
        }
        assert_ne!(
            tuned.params.get("head.fc.weight").unwrap(),
            &build_classifier::<f32>(&ft.network_spec(Head::Classifier { classes: 4 }), &mut Rng::derive(0, &[stream::INIT]), None)
                .unwrap()
                .1
                .get("head.fc.weight")
                .unwrap()
                .clone()
        );

        let unfrozen = finetune(&cfg(&format!("epochs=1\ninit={}", path.display())), &mut Outputs::memory()).unwrap();
        let name = format!("{}.weight", enc(1, "conv"));
        assert_ne!(unfrozen.params.get(&name), init.params.get(&name));
    }

    #[test]
    fn mismatched_init_is_a_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        let pre = RunConfig::parse(&format!("mode=pretrain\n{TINY}epochs=0")).unwrap();
        let mut out = Outputs::create(&tmp.path().join("pre"), &pre).unwrap();
        pretrain(&pre, &mut out).unwrap();
        let path = tmp.path().join("pre/checkpoints/final.scae");
        let err = finetune(&cfg(&format!("width=8\ninit={}", path.display())), &mut Outputs::memory()).unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("init"));
    }

    #[test]
    fn oversized_budget_rejected() {
        let err = finetune(&cfg("label_budget=61"), &mut Outputs::memory()).unwrap_err();
        assert!(err.to_string().contains("label_budget"));
    }
}
