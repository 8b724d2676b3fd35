//! Readers for the planar binary image formats of CIFAR-10, CIFAR-100 and
//! STL-10.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Record layout: `label_bytes` leading label bytes (the one at
/// `label_index` is used), then `channels` planes of `height × width`
/// bytes. STL-10 stores each plane column-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlanarFormat {
    pub label_bytes: usize,
    pub label_index: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub column_major: bool,
}

pub const CIFAR10: PlanarFormat = PlanarFormat {
    label_bytes: 1,
    label_index: 0,
    channels: 3,
    height: 32,
    width: 32,
    classes: 10,
    column_major: false,
};

/// Coarse label then fine label; the fine label is used.
pub const CIFAR100: PlanarFormat = PlanarFormat {
    label_bytes: 2,
    label_index: 1,
    channels: 3,
    height: 32,
    width: 32,
    classes: 100,
    column_major: false,
};

pub const STL10: PlanarFormat = PlanarFormat {
    label_bytes: 0,
    label_index: 0,
    channels: 3,
    height: 96,
    width: 96,
    classes: 10,
    column_major: true,
};

impl PlanarFormat {
    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn record_len(&self) -> usize {
        self.label_bytes + self.pixels()
    }
}

/// Decodes whole records from `bytes`, appending pixels and labels.
fn decode_into(bytes: &[u8], fmt: &PlanarFormat, source: &str, pixels: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<usize> {
    let rec = fmt.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Data(format!(
            "{source}: {} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let plane = fmt.height * fmt.width;
    for record in bytes.chunks_exact(rec) {
        if fmt.label_bytes > 0 {
            let label = record[fmt.label_index] as usize;
            if label >= fmt.classes {
                return Err(Error::Data(format!(
                    "{source}: label {label} out of range for {} classes",
                    fmt.classes
                )));
            }
            labels.push(label);
        }
        let body = &record[fmt.label_bytes..];
        if fmt.column_major {
            for c in 0..fmt.channels {
                let src = &body[c * plane..(c + 1) * plane];
                for y in 0..fmt.height {
                    for x in 0..fmt.width {
                        pixels.push(src[x * fmt.height + y] as f32);
                    }
                }
            }
        } else {
            pixels.extend(body.iter().map(|&b| b as f32));
        }
    }
    Ok(bytes.len() / rec)
}

/// Parses an in-memory buffer of records.
pub fn parse_planar(bytes: &[u8], fmt: &PlanarFormat) -> Result<Dataset> {
    let mut pixels = Vec::with_capacity(bytes.len());
    let mut labels = Vec::new();
    let n = decode_into(bytes, fmt, "buffer", &mut pixels, &mut labels)?;
    finish(pixels, labels, n, fmt)
}

fn finish(pixels: Vec<f32>, labels: Vec<usize>, n: usize, fmt: &PlanarFormat) -> Result<Dataset> {
    let images = Tensor::new(&[n, fmt.channels, fmt.height, fmt.width], pixels)?;
    let labels = (fmt.label_bytes > 0).then_some(labels);
    Dataset::new(images, labels, fmt.classes)
}

/// Reads and concatenates record files. Each file is read and decoded in
/// turn so only one raw file is held in memory next to the decoded pixels.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P], fmt: &PlanarFormat) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Data("no input files".into()));
    }
    let mut total = 0;
    for p in paths {
        total += fs::metadata(p.as_ref())?.len() as usize;
    }
    let mut pixels = Vec::with_capacity(total / fmt.record_len() * fmt.pixels());
    let mut labels = Vec::new();
    let mut n = 0;
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p)?;
        n += decode_into(&bytes, fmt, &p.display().to_string(), &mut pixels, &mut labels)?;
    }
    finish(pixels, labels, n, fmt)
}

/// STL-10 images (`*_X.bin`) with optional 1-based labels (`*_y.bin`).
pub fn load_stl10(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let bytes = fs::read(images)?;
    let mut pixels = Vec::with_capacity(bytes.len());
    let mut unused = Vec::new();
    let n = decode_into(&bytes, &STL10, &images.display().to_string(), &mut pixels, &mut unused)?;
    let labels = match labels {
        None => None,
        Some(path) => {
            let raw = fs::read(path)?;
            if raw.len() != n {
                return Err(Error::Data(format!("{}: {} labels for {n} images", path.display(), raw.len())));
            }
            let labels = raw
                .iter()
                .map(|&b| match b {
                    1..=10 => Ok(b as usize - 1),
                    _ => Err(Error::Data(format!("{}: label {b} outside 1..=10", path.display()))),
                })
                .collect::<Result<Vec<_>>>()?;
            Some(labels)
        }
    };
    let images = Tensor::new(&[n, 3, 96, 96], pixels)?;
    Dataset::new(images, labels, 10)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn format(self) -> &'static PlanarFormat {
        match self {
            DatasetKind::Cifar10 => &CIFAR10,
            DatasetKind::Cifar100 => &CIFAR100,
        }
    }
}

/// Finds CIFAR files in `dir` or its `cifar-10-batches-bin` /
/// `cifar-100-binary` subdirectory. Returns the kind plus train and test
/// file lists.
pub fn detect_dir(dir: &Path) -> Result<(DatasetKind, Vec<PathBuf>, Vec<PathBuf>)> {
    let candidates = [
        dir.to_path_buf(),
        dir.join("cifar-10-batches-bin"),
        dir.join("cifar-100-binary"),
    ];
    for d in &candidates {
        let train: Vec<PathBuf> = (1..=5).map(|i| d.join(format!("data_batch_{i}.bin"))).collect();
        if train.iter().all(|p| p.is_file()) {
            return Ok((DatasetKind::Cifar10, train, vec![d.join("test_batch.bin")]));
        }
        if d.join("train.bin").is_file() {
            return Ok((DatasetKind::Cifar100, vec![d.join("train.bin")], vec![d.join("test.bin")]));
        }
    }
    Err(Error::Data(format!(
        "{}: no CIFAR-10 (data_batch_1..5.bin) or CIFAR-100 (train.bin) files found",
        dir.display()
    )))
}
