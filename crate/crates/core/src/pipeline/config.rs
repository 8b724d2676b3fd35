use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::corruption::{CorruptionKind, CorruptionSpec};
use crate::error::{Error, Result};
use crate::net::{Head, NetworkSpec};
use crate::net::parse_list;
use crate::optim::LrSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Pretrain,
    Finetune,
    ProbeCls,
    ProbeRecon,
    Eval,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Pretrain => "pretrain",
            RunMode::Finetune => "finetune",
            RunMode::ProbeCls => "probe_cls",
            RunMode::ProbeRecon => "probe_recon",
            RunMode::Eval => "eval",
        }
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain" => RunMode::Pretrain,
            "finetune" => RunMode::Finetune,
            "probe_cls" => RunMode::ProbeCls,
            "probe_recon" => RunMode::ProbeRecon,
            "eval" => RunMode::Eval,
            _ => return Err(Error::config("mode", format!("unknown mode `{s}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTask {
    Recon,
    Cls,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    /// Generated shapes, regenerated from `data_seed` on every run.
    Synth,
    /// Directory holding CIFAR-10 or CIFAR-100 binary files.
    Dir(PathBuf),
}

/// Everything a run depends on. [`RunConfig::to_text`] writes every key,
/// so the resolved text alone reproduces the run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: RunMode,
    pub data: DataSource,
    pub data_seed: u64,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_size: usize,
    pub classes: usize,
    /// Encoder layers per stage.
    pub net: Vec<usize>,
    pub width: usize,
    pub shortcut_spacing: usize,
    pub io_shortcut: bool,
    /// Square crop side fed to the network.
    pub crop: usize,
    pub noise: Option<CorruptionKind>,
    /// Chance of corrupting a fine-tuning image.
    pub corrupt_prob: f64,
    pub lr: f64,
    pub milestones: Vec<(usize, f64)>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init: Option<PathBuf>,
    pub label_budget: Option<usize>,
    pub freeze_epochs: usize,
    pub hflip: bool,
    /// Probe target: an encoder ReLU name, `input`, or `all`.
    pub layer: String,
    pub task: EvalTask,
    /// Record wall-clock seconds in the metrics (makes them
    /// non-reproducible).
    pub timing: bool,
}

pub const KEYS: &[&str] = &[
    "batch_size",
    "classes",
    "corrupt_prob",
    "crop",
    "data",
    "data_seed",
    "epochs",
    "freeze_epochs",
    "hflip",
    "init",
    "io_shortcut",
    "label_budget",
    "layer",
    "lr",
    "milestones",
    "mode",
    "net",
    "noise",
    "seed",
    "shortcut_spacing",
    "synth_size",
    "synth_test",
    "synth_train",
    "task",
    "timing",
    "width",
];

/// Parses `key=value` lines; `#` starts a comment, blank lines are
/// skipped. Later duplicates win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected key=value, got `{line}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected 0/1 or true/false, got `{v}`"))),
    }
}

impl RunConfig {
    /// Builds a config from `key=value` pairs, filling defaults for absent
    /// keys. `mode` is required; unknown keys are errors.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::config(k.as_str(), "unknown key"));
        }
        let get = |k: &str| map.get(k).map(String::as_str);
        let mode: RunMode = get("mode")
            .ok_or_else(|| Error::config("mode", "required"))?
            .parse()?;
        let crop = get("crop").map_or(Ok(29), |v| num("crop", v))?;
        let label_budget = match get("label_budget") {
            None | Some("") | Some("all") => None,
            Some(v) => Some(num("label_budget", v)?),
        };
        let noise = match get("noise").unwrap_or("gaussian:30") {
            "none" => None,
            v => Some(CorruptionSpec::parse(v, (crop, crop))?.kind),
        };
        let cfg = RunConfig {
            mode,
            data: match get("data").unwrap_or("synth") {
                "synth" => DataSource::Synth,
                p => DataSource::Dir(PathBuf::from(p)),
            },
            data_seed: get("data_seed").map_or(Ok(0), |v| num("data_seed", v))?,
            synth_train: get("synth_train").map_or(Ok(2000), |v| num("synth_train", v))?,
            synth_test: get("synth_test").map_or(Ok(1000), |v| num("synth_test", v))?,
            synth_size: get("synth_size").map_or(Ok(32), |v| num("synth_size", v))?,
            classes: get("classes").map_or(Ok(10), |v| num("classes", v))?,
            net: get("net").map_or(Ok(vec![2, 2]), |v| parse_list(v, "net"))?,
            width: get("width").map_or(Ok(16), |v| num("width", v))?,
            shortcut_spacing: get("shortcut_spacing").map_or(Ok(2), |v| num("shortcut_spacing", v))?,
            io_shortcut: get("io_shortcut").map_or(Ok(true), |v| flag("io_shortcut", v))?,
            crop,
            noise,
            corrupt_prob: get("corrupt_prob").map_or(Ok(0.0), |v| num("corrupt_prob", v))?,
            lr: get("lr").map_or(Ok(1e-3), |v| num("lr", v))?,
            milestones: LrSchedule::parse_milestones(get("milestones").unwrap_or(""))?,
            epochs: get("epochs").map_or(Ok(10), |v| num("epochs", v))?,
            batch_size: get("batch_size").map_or(Ok(32), |v| num("batch_size", v))?,
            seed: get("seed").map_or(Ok(0), |v| num("seed", v))?,
            init: get("init").filter(|v| !v.is_empty()).map(PathBuf::from),
            label_budget,
            freeze_epochs: get("freeze_epochs").map_or(Ok(0), |v| num("freeze_epochs", v))?,
            // no flips when labels are scarce
            hflip: get("hflip").map_or(Ok(label_budget.is_none()), |v| flag("hflip", v))?,
            layer: get("layer").unwrap_or("all").to_string(),
            task: match get("task").unwrap_or("recon") {
                "recon" => EvalTask::Recon,
                "cls" => EvalTask::Cls,
                v => return Err(Error::config("task", format!("expected recon or cls, got `{v}`"))),
            },
            timing: get("timing").map_or(Ok(false), |v| flag("timing", v))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(&parse_kv(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("width", self.width),
            ("crop", self.crop),
            ("classes", self.classes),
            ("synth_train", self.synth_train),
            ("synth_test", self.synth_test),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*k, "must be positive"));
        }
        if self.data == DataSource::Synth && self.crop > self.synth_size {
            return Err(Error::config("crop", format!("{} exceeds synth_size {}", self.crop, self.synth_size)));
        }
        if !(0.0..=1.0).contains(&self.corrupt_prob) {
            return Err(Error::config("corrupt_prob", "must be in [0, 1]"));
        }
        if self.label_budget == Some(0) {
            return Err(Error::config("label_budget", "must be positive"));
        }
        if self.freeze_epochs > self.epochs {
            return Err(Error::config("freeze_epochs", "exceeds epochs"));
        }
        let needs_init = matches!(self.mode, RunMode::ProbeCls | RunMode::ProbeRecon | RunMode::Eval);
        if needs_init && self.init.is_none() {
            return Err(Error::config("init", format!("{} needs a checkpoint", self.mode.as_str())));
        }
        self.schedule()?;
        if let Some(kind) = self.noise {
            CorruptionSpec {
                kind,
                apply_probability: 1.0,
            }
            .validate()?;
        }
        let head = match self.mode {
            RunMode::Pretrain => Head::Autoencoder,
            _ => Head::Classifier { classes: self.classes },
        };
        self.network_spec(head).validate()
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr, self.milestones.clone())
    }

    pub fn network_spec(&self, head: Head) -> NetworkSpec {
        let mut spec = NetworkSpec::from_layer_counts(&self.net, self.width, [3, self.crop, self.crop], head);
        spec.shortcut_spacing = self.shortcut_spacing;
        spec.input_output_shortcut = self.io_shortcut;
        spec
    }

    /// Corruption applied to every image, if any.
    pub fn corruption(&self) -> Option<CorruptionSpec> {
        self.noise.map(|kind| CorruptionSpec {
            kind,
            apply_probability: 1.0,
        })
    }

    /// Every key with its resolved value, sorted.
    pub fn to_map(&self) -> BTreeMap<&'static str, String> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let b = |v: bool| u8::from(v).to_string();
        let mut m = BTreeMap::new();
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("classes", self.classes.to_string());
        m.insert("corrupt_prob", self.corrupt_prob.to_string());
        m.insert("crop", self.crop.to_string());
        m.insert(
            "data",
            match &self.data {
                DataSource::Synth => "synth".to_string(),
                DataSource::Dir(p) => p.display().to_string(),
            },
        );
        m.insert("data_seed", self.data_seed.to_string());
        m.insert("epochs", self.epochs.to_string());
        m.insert("freeze_epochs", self.freeze_epochs.to_string());
        m.insert("hflip", b(self.hflip));
        m.insert(
            "init",
            self.init.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        m.insert("io_shortcut", b(self.io_shortcut));
        m.insert(
            "label_budget",
            self.label_budget.map_or_else(|| "all".to_string(), |b| b.to_string()),
        );
        m.insert("layer", self.layer.clone());
        m.insert("lr", self.lr.to_string());
        m.insert(
            "milestones",
            self.milestones
                .iter()
                .map(|(e, m)| format!("{e}:{m}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("mode", self.mode.as_str().to_string());
        m.insert("net", list(&self.net));
        m.insert("noise", self.noise.map_or_else(|| "none".to_string(), |k| k.to_string()));
        m.insert("seed", self.seed.to_string());
        m.insert("shortcut_spacing", self.shortcut_spacing.to_string());
        m.insert("synth_size", self.synth_size.to_string());
        m.insert("synth_test", self.synth_test.to_string());
        m.insert("synth_train", self.synth_train.to_string());
        m.insert(
            "task",
            match self.task {
                EvalTask::Recon => "recon",
                EvalTask::Cls => "cls",
            }
            .to_string(),
        );
        m.insert("timing", b(self.timing));
        m.insert("width", self.width.to_string());
        m
    }

    /// Canonical `key=value` text, sorted keys, LF endings.
    pub fn to_text(&self) -> String {
        self.to_map().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_and_comments() {
        let cfg = RunConfig::parse("# comment\nmode=pretrain\n\nepochs = 3 # trailing\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.net, vec![2, 2]);
        assert_eq!(cfg.noise, Some(CorruptionKind::Gaussian { sigma: 30.0 }));
        assert!(cfg.hflip);
    }

    #[test]
    fn every_key_is_written() {
        let cfg = RunConfig::parse("mode=pretrain").unwrap();
        let keys: Vec<&str> = cfg.to_map().keys().copied().collect();
        assert_eq!(keys, KEYS);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("mode=pretrain\nepoch=3").unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("epoch"));
    }

    #[test]
    fn label_budget_disables_flips() {
        let cfg = RunConfig::parse("mode=finetune\nlabel_budget=400").unwrap();
        assert!(!cfg.hflip);
    }

    #[test]
    fn probe_needs_init() {
        let err = RunConfig::parse("mode=probe_cls").unwrap_err();
        assert!(err.to_string().contains("init"));
    }

    #[test]
    fn block_noise_resolves_against_crop() {
        let cfg = RunConfig::parse("mode=pretrain\nnoise=block\ncrop=17\nsynth_size=20").unwrap();
        assert_eq!(cfg.to_map()["noise"], "block:4:5:5");
    }

    #[test]
    fn bad_geometry_rejected() {
        assert!(RunConfig::parse("mode=pretrain\ncrop=28").is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(
            epochs in 0usize..50,
            seed in any::<u64>(),
            lr in 1e-6f64..1.0,
            budget in proptest::option::of(1usize..5000),
            sigma in 0.0f64..100.0,
            io in any::<bool>(),
        ) {
            let text = format!(
                "mode=finetune\nepochs={epochs}\nseed={seed}\nlr={lr}\nnoise=gaussian:{sigma}\nio_shortcut={}\nmilestones=3:0.5,7:0.1\n{}",
                u8::from(io),
                budget.map(|b| format!("label_budget={b}\n")).unwrap_or_default(),
            );
            let cfg = RunConfig::parse(&text).unwrap();
            let again = RunConfig::parse(&cfg.to_text()).unwrap();
            prop_assert_eq!(&again, &cfg);
            prop_assert_eq!(again.to_text(), cfg.to_text());
        }
    }
}
