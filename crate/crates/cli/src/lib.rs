//! Argument handling and subcommands of the `scae` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use scae_core::data::center_crop;
use scae_core::pipeline::{self, load_data, parse_kv, Outputs, RunConfig};
use scae_core::report::{dump_feature_maps, psnr, write_montage};
use scae_core::rng::stream;
use scae_core::{corrupt, expected_corrupted_psnr, Checkpoint, CorruptionKind, Rng};

#[derive(Parser, Debug)]
#[command(name = "scae", version, about = "Denoising auto-encoders with symmetric shortcuts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the auto-encoder to undo corruption.
    Pretrain(RunArgs),
    /// Train the classifier, optionally from a pre-trained encoder (--init).
    Finetune(RunArgs),
    /// Fit heads on frozen encoder activations, one per layer.
    Probe {
        /// `cls` for softmax regression, `recon` for a deconvolution stack.
        #[arg(long, value_parser = ["cls", "recon"])]
        kind: Option<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint (--init) on the test split.
    Eval(RunArgs),
    /// Write clean and corrupted training images side by side.
    CorruptPreview {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Images in the grid.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Output PPM file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one PGM per channel of a layer's activation for a test image.
    DumpFeatures {
        checkpoint: PathBuf,
        /// Index of the test image.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint's network spec and tensor table.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Fresh run directory.
    #[arg(long)]
    pub out: PathBuf,
}

macro_rules! config_flags {
    ($($field:ident => $key:literal, $help:literal;)*) => {
        /// Run settings. Each flag overrides the same key from `--config`.
        #[derive(Args, Debug, Default, Clone)]
        pub struct ConfigArgs {
            /// `key=value` file, `#` starts a comment.
            #[arg(long, value_name = "FILE")]
            pub config: Option<PathBuf>,
            $(
                #[arg(long, value_name = "VALUE", help = $help)]
                pub $field: Option<String>,
            )*
        }

        impl ConfigArgs {
            /// `(key, value)` for every flag given.
            pub fn overrides(&self) -> Vec<(&'static str, String)> {
                let mut v = Vec::new();
                $(
                    if let Some(x) = &self.$field {
                        v.push(($key, x.clone()));
                    }
                )*
                v
            }
        }
    };
}

config_flags! {
    batch_size => "batch_size", "Images per step [default: 32]";
    classes => "classes", "Number of classes [default: 10]";
    corrupt_prob => "corrupt_prob", "Chance of corrupting a fine-tuning image [default: 0]";
    crop => "crop", "Square crop side [default: 29]";
    data => "data", "`synth` or a CIFAR binary directory [default: synth]";
    data_seed => "data_seed", "Seed of the synthetic images [default: 0]";
    epochs => "epochs", "Training epochs [default: 10]";
    freeze_epochs => "freeze_epochs", "Leading epochs with a frozen encoder [default: 0]";
    hflip => "hflip", "Random horizontal flips, 0 or 1 [default: 1 without a label budget]";
    init => "init", "Checkpoint to start from or score";
    io_shortcut => "io_shortcut", "Input-to-output shortcut, 0 or 1 [default: 1]";
    label_budget => "label_budget", "Class-balanced labelled subset size, or `all`";
    layer => "layer", "Probe or dump target: enc.N.relu, input, or all [default: all]";
    lr => "lr", "Base learning rate [default: 0.001]";
    milestones => "milestones", "Learning-rate drops as epoch:factor,... ";
    net => "net", "Encoder layers per stage, e.g. 5,5,5,0 or m=5,5,5,0 [default: 2,2]";
    noise => "noise", "gaussian:SIGMA, block, block:N:H:W, or none [default: gaussian:30]";
    seed => "seed", "Seed for init, shuffling and corruption [default: 0]";
    shortcut_spacing => "shortcut_spacing", "Layers between internal shortcuts, 0 for none [default: 2]";
    synth_size => "synth_size", "Synthetic image side [default: 32]";
    synth_test => "synth_test", "Synthetic test images [default: 1000]";
    synth_train => "synth_train", "Synthetic training images [default: 2000]";
    task => "task", "Eval task: recon or cls [default: recon]";
    timing => "timing", "Record wall-clock seconds, 0 or 1 [default: 0]";
    width => "width", "Channels per layer [default: 16]";
}

/// Merges the config file, the flags and `mode` into a validated config.
pub fn resolve(args: &ConfigArgs, mode: Option<&str>) -> Result<RunConfig> {
    let mut map: BTreeMap<String, String> = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_kv(&text)?
        }
        None => BTreeMap::new(),
    };
    for (key, value) in args.overrides() {
        let value = match key {
            "net" => value.strip_prefix("m=").unwrap_or(&value).to_string(),
            _ => value,
        };
        map.insert(key.to_string(), value);
    }
    if let Some(mode) = mode {
        map.insert("mode".into(), mode.into());
    }
    Ok(RunConfig::from_map(&map)?)
}

/// `mode` named in the `--config` file, if any.
fn file_mode(args: &ConfigArgs) -> Result<Option<String>> {
    let Some(path) = &args.config else {
        return Ok(None);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_kv(&text)?.remove("mode"))
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut outputs = Outputs::create(out, cfg)?;
    pipeline::run(cfg, &mut outputs)?;
    for rec in outputs.records().iter().rev().take(2).rev() {
        println!("{}", rec.to_csv());
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(run) => train(&resolve(&run.cfg, Some("pretrain"))?, &run.out),
        Command::Finetune(run) => train(&resolve(&run.cfg, Some("finetune"))?, &run.out),
        Command::Eval(run) => train(&resolve(&run.cfg, Some("eval"))?, &run.out),
        Command::Probe { kind, run } => {
            let mode = match kind.as_deref() {
                Some("recon") => "probe_recon".to_string(),
                Some(_) => "probe_cls".to_string(),
                None => file_mode(&run.cfg)?
                    .filter(|m| m.starts_with("probe_"))
                    .unwrap_or_else(|| "probe_cls".into()),
            };
            train(&resolve(&run.cfg, Some(&mode))?, &run.out)
        }
        Command::CorruptPreview { cfg, count, out } => corrupt_preview(&resolve(&cfg, Some("pretrain"))?, count, &out),
        Command::DumpFeatures {
            checkpoint,
            index,
            mut cfg,
            out,
        } => {
            let ckpt: Checkpoint = Checkpoint::load(&checkpoint)?;
            cfg.init = Some(checkpoint.display().to_string());
            cfg.crop.get_or_insert_with(|| ckpt.spec.input_shape[1].to_string());
            let layer = cfg.layer.clone().context("--layer is required")?;
            let run = resolve(&cfg, Some("eval"))?;
            let (_, test) = load_data(&run)?;
            if index >= test.len() {
                bail!("--index {index} but the test split has {} images", test.len());
            }
            let image = center_crop(&test.images.item(index)?, (run.crop, run.crop))?;
            let files = dump_feature_maps(&ckpt, &image, &layer, &out)?;
            println!("wrote {} feature maps to {}", files.len(), out.display());
            Ok(())
        }
        Command::InspectCheckpoint { path } => {
            let ckpt: Checkpoint = Checkpoint::load(&path)?;
            print!("{}", inspect(&ckpt));
            Ok(())
        }
    }
}

fn corrupt_preview(cfg: &RunConfig, count: usize, out: &Path) -> Result<()> {
    let (train, _) = load_data(cfg)?;
    let n = count.clamp(1, train.len());
    let clean = center_crop(&train.images.select(&(0..n).collect::<Vec<_>>())?, (cfg.crop, cfg.crop))?;
    let noisy = match cfg.corruption() {
        Some(spec) => corrupt(&clean, &spec, &mut Rng::derive(cfg.seed, &[stream::EVAL]))?.0,
        None => clean.clone(),
    };
    let rows = (0..n)
        .map(|i| Ok(vec![clean.item(i)?, noisy.item(i)?]))
        .collect::<Result<Vec<_>>>()?;
    write_montage(&rows, out)?;
    print!("psnr {:.3} dB", psnr(&clean, &noisy)?);
    if let Some(CorruptionKind::Gaussian { sigma }) = cfg.noise {
        print!(" (expected {:.3})", expected_corrupted_psnr(sigma));
    }
    println!("\nwrote {}", out.display());
    Ok(())
}

/// Spec text followed by a `name shape dtype` table.
pub fn inspect(ckpt: &Checkpoint) -> String {
    let mut s = ckpt.spec.to_canonical_text();
    s.push('\n');
    let shape = |dims: &[usize]| dims.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
    let mut rows: Vec<(String, String, &str)> = ckpt
        .params
        .iter()
        .map(|(name, t)| (name.to_string(), shape(t.shape()), "f32"))
        .collect();
    let c = ckpt.norm.channels();
    rows.push(("norm.mean".into(), c.to_string(), "f32"));
    rows.push(("norm.std".into(), c.to_string(), "f32"));
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    for (name, dims, dtype) in &rows {
        s.push_str(&format!("{name:<width$}  {dims:<12} {dtype}\n"));
    }
    let params: usize = ckpt.params.trainable_count();
    s.push_str(&format!("trainable parameters: {params}\n"));
    match &ckpt.optimizer {
        Some(state) => s.push_str(&format!("optimizer: adam, step {}\n", state.step)),
        None => s.push_str("optimizer: none\n"),
    }
    s
}

/// 1 for bad input, 2 for failed runs.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<scae_core::Error>()) {
        Some(e) if e.is_usage() => 1,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Parser)]
    struct Wrap {
        #[command(flatten)]
        cfg: ConfigArgs,
    }

    #[test]
    fn every_config_key_has_a_flag() {
        let keys: Vec<&str> = pipeline::KEYS.iter().copied().filter(|k| *k != "mode").collect();
        let mut args = vec!["scae".to_string()];
        for k in &keys {
            args.push(format!("--{}", k.replace('_', "-")));
            args.push("v".into());
        }
        let cfg = Wrap::try_parse_from(args).unwrap().cfg;
        let given: Vec<&str> = cfg.overrides().iter().map(|(k, _)| *k).collect();
        assert_eq!(given, keys);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "epochs=7\nseed=3\n").unwrap();
        let args = ConfigArgs {
            config: Some(path),
            epochs: Some("2".into()),
            net: Some("m=5,5,5,0".into()),
            ..Default::default()
        };
        let cfg = resolve(&args, Some("pretrain")).unwrap();
        assert_eq!((cfg.epochs, cfg.seed), (2, 3));
        assert_eq!(cfg.net, vec![5, 5, 5, 0]);
    }

    #[test]
    fn usage_errors_exit_one() {
        let args = ConfigArgs {
            epochs: Some("many".into()),
            ..Default::default()
        };
        let err = resolve(&args, Some("pretrain")).unwrap_err();
        assert_eq!(exit_code(&err), 1);
        assert!(err.to_string().contains("epochs"));
        let io = anyhow::Error::from(scae_core::Error::Data("truncated".into()));
        assert_eq!(exit_code(&io), 2);
    }
}
