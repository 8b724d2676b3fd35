use crate::data::center_crop;
use crate::error::{Error, Result};
use crate::net::{Head, Network};
use crate::rng::{stream, Rng};

use super::{cls_eval, corrupt_opt, expect_mode, load_data, load_init, recon_eval, EvalTask, MetricsRecord, Outputs, RunConfig, RunMode};

/// Scores the `init` checkpoint on the test split: PSNR of reconstructing
/// center crops from their corrupted versions (`task=recon`), or top-1
/// accuracy on center crops (`task=cls`). Emits one `test` record at
/// epoch 0.
pub fn evaluate(cfg: &RunConfig, out: &mut Outputs) -> Result<MetricsRecord> {
    expect_mode(cfg, &[RunMode::Eval])?;
    let ckpt = load_init(cfg)?;
    let net = Network::new(ckpt.spec.clone())?;
    let (_, test) = load_data(cfg)?;
    let images = center_crop(&test.images, (cfg.crop, cfg.crop))?;
    let record = match (cfg.task, ckpt.spec.head) {
        (EvalTask::Recon, Head::Autoencoder) => {
            let noisy = corrupt_opt(&images, cfg.corruption(), &mut Rng::derive(cfg.seed, &[stream::EVAL]))?;
            let (loss, psnr, _) = recon_eval(&net, &ckpt.params, &ckpt.norm, &images, &noisy, cfg.batch_size, 0)?;
            MetricsRecord::new(0, "test").loss(loss).psnr(psnr)
        }
        (EvalTask::Cls, Head::Classifier { .. }) => {
            let labels = test
                .labels
                .as_ref()
                .ok_or_else(|| Error::Data("test split has no labels".into()))?;
            let (loss, acc) = cls_eval(&net, &ckpt.params, &ckpt.norm, &images, labels, cfg.batch_size)?;
            MetricsRecord::new(0, "test").loss(loss).accuracy(acc)
        }
        (_, head) => {
            return Err(Error::config("task", format!("checkpoint has a {head} head")));
        }
    };
    out.record(record.clone())?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NormStats;
    use crate::net::{Checkpoint, NetworkSpec, HEAD_BIAS, HEAD_WEIGHT};
    use crate::Tensor;

    const TINY: &str = "synth_test=200\nsynth_size=12\ncrop=11\nnet=1,1\nwidth=4\nclasses=4\n";

    fn save(dir: &std::path::Path, ckpt: &Checkpoint) -> std::path::PathBuf {
        let path = dir.join("m.scae");
        ckpt.save(&path).unwrap();
        path
    }

    fn zeroed(head: Head) -> Checkpoint {
        let spec = NetworkSpec::from_layer_counts(&[1, 1], 4, [3, 11, 11], head);
        let net = Network::new(spec.clone()).unwrap();
        let mut params = net.init_params::<f32>(&mut Rng::new(0), 0.0).unwrap();
        for (name, t) in params.iter_mut() {
            if !name.ends_with("running_var") && !name.ends_with("gamma") {
                t.fill(0.0);
            }
        }
        Checkpoint::new(spec, params, NormStats { mean: vec![120.0; 3], std: vec![50.0; 3] })
    }

    #[test]
    fn identity_model_scores_the_noise_floor() {
        let tmp = tempfile::tempdir().unwrap();
        let path = save(tmp.path(), &zeroed(Head::Autoencoder));
        let cfg = RunConfig::parse(&format!("mode=eval\n{TINY}synth_test=2000\ninit={}", path.display())).unwrap();
        let rec = evaluate(&cfg, &mut Outputs::memory()).unwrap();
        let psnr = rec.psnr.unwrap();
        assert!((psnr - 18.588).abs() < 0.05, "{psnr}");
    }

    #[test]
    fn constant_logits_score_majority_class() {
        let tmp = tempfile::tempdir().unwrap();
        let mut ckpt = zeroed(Head::Classifier { classes: 4 });
        ckpt.params.get_mut(HEAD_WEIGHT).unwrap().fill(0.0);
        ckpt.params.set(HEAD_BIAS, Tensor::new(&[4], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let path = save(tmp.path(), &ckpt);
        let cfg = RunConfig::parse(&format!("mode=eval\ntask=cls\n{TINY}synth_test=203\ninit={}", path.display())).unwrap();
        let rec = evaluate(&cfg, &mut Outputs::memory()).unwrap();
        let (_, test) = load_data(&cfg).unwrap();
        let labels = test.labels.as_ref().unwrap();
        let share = labels.iter().filter(|&&l| l == 2).count() as f64 / labels.len() as f64;
        assert_eq!(rec.accuracy.unwrap(), share);
        assert_eq!(Some(share), test.majority_fraction());
    }

    #[test]
    fn repeat_is_identical_and_head_checked() {
        let tmp = tempfile::tempdir().unwrap();
        let path = save(tmp.path(), &zeroed(Head::Autoencoder));
        let cfg = RunConfig::parse(&format!("mode=eval\n{TINY}init={}", path.display())).unwrap();
        let a = evaluate(&cfg, &mut Outputs::memory()).unwrap();
        let b = evaluate(&cfg, &mut Outputs::memory()).unwrap();
        assert_eq!(a, b);
        let wrong = RunConfig::parse(&format!("mode=eval\ntask=cls\n{TINY}init={}", path.display())).unwrap();
        assert!(evaluate(&wrong, &mut Outputs::memory()).unwrap_err().is_usage());
    }
}
