use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::net::Checkpoint;
use crate::pipeline::RunConfig;

pub const CSV_HEADER: &str = "epoch,split,loss,psnr,accuracy,lr,wall_seconds";

/// One line of `metrics.csv`. Epoch 0 holds the evaluation before any
/// training; epoch `k` the state after `k` training epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub psnr: Option<f64>,
    pub accuracy: Option<f64>,
    pub lr: Option<f64>,
    pub wall_seconds: Option<f64>,
}

impl MetricsRecord {
    pub fn new(epoch: usize, split: impl Into<String>) -> Self {
        MetricsRecord {
            epoch,
            split: split.into(),
            loss: None,
            psnr: None,
            accuracy: None,
            lr: None,
            wall_seconds: None,
        }
    }

    pub fn loss(mut self, v: f64) -> Self {
        self.loss = Some(v);
        self
    }

    pub fn psnr(mut self, v: f64) -> Self {
        self.psnr = Some(v);
        self
    }

    pub fn accuracy(mut self, v: f64) -> Self {
        self.accuracy = Some(v);
        self
    }

    pub fn lr(mut self, v: f64) -> Self {
        self.lr = Some(v);
        self
    }

    fn values(&self) -> [Option<f64>; 5] {
        [self.loss, self.psnr, self.accuracy, self.lr, self.wall_seconds]
    }

    pub fn to_csv(&self) -> String {
        let mut line = format!("{},{}", self.epoch, self.split);
        for v in self.values() {
            line.push(',');
            if let Some(v) = v {
                line.push_str(&format_g6(v));
            }
        }
        line
    }
}

/// `printf("%.6g")`: six significant digits, trailing zeros removed,
/// scientific notation for exponents below -4 or at least 6.
pub fn format_g6(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0" } else { "0" }.to_string();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Metric records of one run, mirrored into `metrics.csv` and checkpoints
/// written under `checkpoints/` when the run has a directory.
pub struct Outputs {
    dir: Option<PathBuf>,
    records: Vec<MetricsRecord>,
    timing: bool,
    start: Instant,
}

impl Outputs {
    /// Keeps everything in memory.
    pub fn memory() -> Self {
        Outputs {
            dir: None,
            records: Vec::new(),
            timing: false,
            start: Instant::now(),
        }
    }

    /// Creates a fresh run directory with `config.resolved`, an empty
    /// `metrics.csv`, `checkpoints/` and `images/`. An existing non-empty
    /// directory is refused.
    pub fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        if dir.exists() {
            let occupied = !dir.is_dir() || fs::read_dir(dir)?.next().is_some();
            if occupied {
                return Err(Error::config(
                    "out",
                    format!("{} exists and is not an empty directory", dir.display()),
                ));
            }
        }
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::create_dir_all(dir.join("images"))?;
        fs::write(dir.join("config.resolved"), cfg.to_text())?;
        fs::write(dir.join("metrics.csv"), format!("{CSV_HEADER}\n"))?;
        Ok(Outputs {
            dir: Some(dir.to_path_buf()),
            records: Vec::new(),
            timing: cfg.timing,
            start: Instant::now(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn images_dir(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("images"))
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<MetricsRecord> {
        self.records
    }

    /// Appends a record. Non-finite values are refused so they never reach
    /// the CSV.
    pub fn record(&mut self, mut rec: MetricsRecord) -> Result<()> {
        if rec.values().iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "metrics record" });
        }
        if self.timing {
            rec.wall_seconds = Some(self.start.elapsed().as_secs_f64());
        }
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new().append(true).open(dir.join("metrics.csv"))?;
            writeln!(f, "{}", rec.to_csv())?;
        }
        self.records.push(rec);
        Ok(())
    }

    /// Writes `checkpoints/{name}.scae` when the run has a directory.
    pub fn checkpoint(&self, name: &str, ckpt: &Checkpoint) -> Result<Option<PathBuf>> {
        match &self.dir {
            None => Ok(None),
            Some(dir) => {
                let path = dir.join("checkpoints").join(format!("{name}.scae"));
                ckpt.save(&path)?;
                Ok(Some(path))
            }
        }
    }

    /// Writes a text artifact next to `metrics.csv`.
    pub fn write_file(&self, name: &str, contents: &str) -> Result<()> {
        if let Some(dir) = &self.dir {
            fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }
}
