use crate::data::{preprocess, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// Random offset per image, plus optional flips.
    Random,
    /// Centered offset, never flipped.
    Center,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub hflip: bool,
    /// `(height, width)` of the crop.
    pub crop: (usize, usize),
    pub crop_mode: CropMode,
}

impl BatchPlan {
    /// Deterministic, unshuffled, center-cropped plan for evaluation.
    pub fn eval(batch_size: usize, crop: (usize, usize)) -> Self {
        BatchPlan {
            batch_size,
            seed: 0,
            shuffle: false,
            hflip: false,
            crop,
            crop_mode: CropMode::Center,
        }
    }
}

/// Mirrors image `i` left-right where `mask[i]` is set.
pub fn hflip(batch: &Tensor<f32>, mask: &[bool]) -> Result<Tensor<f32>> {
    let (n, c, h, w) = batch.dims4()?;
    if mask.len() != n {
        return Err(Error::InvalidArgument(format!("flip mask of {} for {n} images", mask.len())));
    }
    let mut out = batch.clone();
    let item = c * h * w;
    for (img, &flip) in out.data_mut().chunks_mut(item).zip(mask) {
        if flip {
            for row in img.chunks_mut(w) {
                row.reverse();
            }
        }
    }
    Ok(out)
}

fn crop_at(batch: &Tensor<f32>, offsets: &[(usize, usize)], flips: &[bool], size: (usize, usize)) -> Result<Tensor<f32>> {
    let (n, c, h, w) = batch.dims4()?;
    let (ch, cw) = size;
    let mut data = Vec::with_capacity(n * c * ch * cw);
    for (i, (&(oy, ox), &flip)) in offsets.iter().zip(flips).enumerate() {
        for k in 0..c {
            let plane = &batch.data()[(i * c + k) * h * w..(i * c + k + 1) * h * w];
            for y in oy..oy + ch {
                let row = &plane[y * w..(y + 1) * w];
                if flip {
                    // flip the whole row, then crop
                    data.extend((0..cw).map(|x| row[w - 1 - (ox + x)]));
                } else {
                    data.extend_from_slice(&row[ox..ox + cw]);
                }
            }
        }
    }
    Tensor::new(&[n, c, ch, cw], data)
}

fn check_crop(batch: &Tensor<f32>, size: (usize, usize)) -> Result<(usize, usize)> {
    let (_, _, h, w) = batch.dims4()?;
    if size.0 == 0 || size.1 == 0 || size.0 > h || size.1 > w {
        return Err(Error::Geometry(format!(
            "crop {}x{} does not fit a {h}x{w} image",
            size.0, size.1
        )));
    }
    Ok((h, w))
}

pub fn center_crop(batch: &Tensor<f32>, size: (usize, usize)) -> Result<Tensor<f32>> {
    let (h, w) = check_crop(batch, size)?;
    let n = batch.shape()[0];
    let offset = ((h - size.0) / 2, (w - size.1) / 2);
    crop_at(batch, &vec![offset; n], &vec![false; n], size)
}

/// Crops (and in random mode optionally flips with probability 1/2) every
/// image. Per image the draws are: flip, row offset, column offset.
pub fn augment(batch: &Tensor<f32>, plan: &BatchPlan, rng: &mut Rng) -> Result<Tensor<f32>> {
    let (h, w) = check_crop(batch, plan.crop)?;
    if plan.crop_mode == CropMode::Center {
        return center_crop(batch, plan.crop);
    }
    let n = batch.shape()[0];
    let mut flips = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    for _ in 0..n {
        flips.push(plan.hflip && rng.bernoulli(0.5));
        offsets.push((rng.below(h - plan.crop.0 + 1), rng.below(w - plan.crop.1 + 1)));
    }
    crop_at(batch, &offsets, &flips, plan.crop)
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub index: usize,
    pub indices: Vec<usize>,
    /// Augmented images in raw pixel values.
    pub raw: Tensor<f32>,
    /// `raw` after normalization.
    pub norm: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
}

/// One epoch of batches. The order is a shuffle keyed by `(seed, epoch)`
/// and augmentation draws are keyed by `(seed, epoch, batch)`, so replaying
/// an epoch reproduces it exactly. The last batch may be short.
pub struct Batches<'a> {
    data: &'a Dataset,
    plan: &'a BatchPlan,
    stats: &'a NormStats,
    epoch: usize,
    order: Vec<usize>,
    next: usize,
}

impl<'a> Batches<'a> {
    pub fn new(data: &'a Dataset, plan: &'a BatchPlan, stats: &'a NormStats, epoch: usize) -> Result<Self> {
        if plan.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        check_crop(&data.images, plan.crop)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        if plan.shuffle {
            Rng::derive(plan.seed, &[stream::SHUFFLE, epoch as u64]).shuffle(&mut order);
        }
        Ok(Batches {
            data,
            plan,
            stats,
            epoch,
            order,
            next: 0,
        })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.plan.batch_size)
    }

    fn make(&self, index: usize) -> Result<Batch> {
        let start = index * self.plan.batch_size;
        let end = (start + self.plan.batch_size).min(self.order.len());
        let indices = self.order[start..end].to_vec();
        let images = self.data.images.select(&indices)?;
        let mut rng = Rng::derive(self.plan.seed, &[stream::AUGMENT, self.epoch as u64, index as u64]);
        let raw = augment(&images, self.plan, &mut rng)?;
        let norm = preprocess(&raw, self.stats)?;
        let labels = self
            .data
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Batch {
            index,
            indices,
            raw,
            norm,
            labels,
        })
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.num_batches() {
            return None;
        }
        let b = self.make(self.next);
        self.next += 1;
        Some(b)
    }
}
