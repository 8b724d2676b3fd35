//! Datasets, preprocessing, augmentation and batching.

mod batch;
mod cifar;
mod norm;
mod synth;

pub use batch::{augment, center_crop, hflip, Batch, BatchPlan, Batches, CropMode};
pub use cifar::{
    detect_dir, load_cifar_binary, load_stl10, parse_planar, DatasetKind, PlanarFormat, CIFAR10, CIFAR100, STL10,
};
pub use norm::{deprocess, preprocess, NormStats};
pub use synth::{synth_dataset, SHAPE_CLASSES};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Images in raw `[0, 255]` pixel values, `(N, C, H, W)`, with optional
/// labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<usize>>, classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Data(format!("{} labels for {n} images", labels.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::LabelOutOfRange { label: bad, classes });
            }
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Dataset {
            images: self.images.select(indices)?,
            labels,
            classes: self.classes,
        })
    }

    /// Splits off the last `ceil(fraction · N)` images.
    pub fn split_tail(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("split fraction {fraction}")));
        }
        let n = self.len();
        let tail = ((n as f64 * fraction).ceil() as usize).min(n.saturating_sub(1));
        let head: Vec<usize> = (0..n - tail).collect();
        let rest: Vec<usize> = (n - tail..n).collect();
        Ok((self.subset(&head)?, self.subset(&rest)?))
    }

    /// Indices of a class-balanced labelled subset of size `budget`: every
    /// class gets `budget / K` images, the remainder goes to the lowest
    /// class ids. Order within the result is shuffled.
    pub fn balanced_indices(&self, budget: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("label budget needs a labelled dataset".into()))?;
        if budget > labels.len() {
            return Err(Error::config(
                "label_budget",
                format!("{budget} exceeds the {} training images", labels.len()),
            ));
        }
        let k = self.classes;
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut picked = Vec::with_capacity(budget);
        for (c, members) in by_class.iter_mut().enumerate() {
            let want = budget / k + usize::from(c < budget % k);
            if want > members.len() {
                return Err(Error::config(
                    "label_budget",
                    format!("class {c} has {} images, {want} needed", members.len()),
                ));
            }
            rng.shuffle(members);
            picked.extend_from_slice(&members[..want]);
        }
        rng.shuffle(&mut picked);
        Ok(picked)
    }

    /// Frequency of the most common label.
    pub fn majority_fraction(&self) -> Option<f64> {
        let labels = self.labels.as_ref()?;
        let mut counts = vec![0usize; self.classes];
        for &l in labels {
            counts[l] += 1;
        }
        Some(*counts.iter().max()? as f64 / labels.len().max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(labels: Vec<usize>, classes: usize) -> Dataset {
        let n = labels.len();
        let images = Tensor::from_fn(&[n, 1, 2, 2], |i| (i / 4) as f32).unwrap();
        Dataset::new(images, Some(labels), classes).unwrap()
    }

    #[test]
    fn label_range_checked() {
        let images = Tensor::zeros(&[2, 1, 2, 2]).unwrap();
        assert!(matches!(
            Dataset::new(images, Some(vec![0, 10]), 10),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn tail_split() {
        let d = labelled((0..100).map(|i| i % 10).collect(), 10);
        let (train, held) = d.split_tail(0.05).unwrap();
        assert_eq!((train.len(), held.len()), (95, 5));
        assert_eq!(held.images.data()[0], 95.0);
    }

    #[test]
    fn balanced_budget() {
        let d = labelled((0..200).map(|i| i % 4).collect(), 4);
        let idx = d.balanced_indices(22, &mut Rng::new(3)).unwrap();
        let mut counts = [0; 4];
        for i in &idx {
            counts[d.labels.as_ref().unwrap()[*i]] += 1;
        }
        assert_eq!(counts, [6, 6, 5, 5]);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 22);
        assert!(d.balanced_indices(201, &mut Rng::new(3)).is_err());
    }

    #[test]
    fn majority() {
        let d = labelled(vec![0, 0, 0, 1], 2);
        assert_eq!(d.majority_fraction(), Some(0.75));
    }
}
