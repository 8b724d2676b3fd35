//! Tiny labelled images of flat-coloured geometric shapes; the class is the
//! shape type.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SHAPE_CLASSES: [&str; 10] = [
    "square",
    "disk",
    "triangle",
    "diamond",
    "ring",
    "plus",
    "cross",
    "hbar",
    "vbar",
    "frame",
];

/// Shape membership in coordinates scaled so the shape spans `[-1, 1]`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let box_ = au.max(av) <= 1.0;
    match class {
        0 => box_,
        1 => u * u + v * v <= 1.0,
        2 => (-1.0..=1.0).contains(&v) && au <= (v + 1.0) / 2.0,
        3 => au + av <= 1.0,
        4 => (0.25..=1.0).contains(&(u * u + v * v)),
        5 => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        6 => box_ && ((u - v).abs() <= 0.4 || (u + v).abs() <= 0.4),
        7 => au <= 1.0 && av <= 0.35,
        8 => av <= 1.0 && au <= 0.35,
        _ => box_ && au.max(av) >= 0.6,
    }
}

/// `n` RGB images of `size × size` raw pixels. Labels cycle through the
/// classes and are then shuffled, so every class appears `n / K` or
/// `n / K + 1` times. Each image draws a dark background colour (channels
/// in `[0, 96)`), a bright foreground colour (channels in `[160, 256)`), a
/// centre and a radius.
pub fn synth_dataset(rng: &mut Rng, n: usize, classes: usize, size: usize) -> Result<Dataset> {
    if classes == 0 || classes > SHAPE_CLASSES.len() {
        return Err(Error::config(
            "classes",
            format!("synthetic data supports 1..={} classes, got {classes}", SHAPE_CLASSES.len()),
        ));
    }
    if n == 0 || size < 8 {
        return Err(Error::config("synth", format!("need n > 0 and size >= 8, got n={n} size={size}")));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    let plane = size * size;
    let mut data = vec![0f32; n * 3 * plane];
    let s = size as f64;
    for (img, &label) in data.chunks_mut(3 * plane).zip(&labels) {
        let bg: [f64; 3] = std::array::from_fn(|_| rng.below(96) as f64);
        let fg: [f64; 3] = std::array::from_fn(|_| (160 + rng.below(96)) as f64);
        let cx = s * (0.35 + 0.3 * rng.uniform());
        let cy = s * (0.35 + 0.3 * rng.uniform());
        let r = s * (0.2 + 0.12 * rng.uniform());
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5 - cx) / r;
                let v = (y as f64 + 0.5 - cy) / r;
                let color = if inside(label, u, v) { &fg } else { &bg };
                for (c, &value) in color.iter().enumerate() {
                    img[c * plane + y * size + x] = value as f32;
                }
            }
        }
    }
    let images = Tensor::new(&[n, 3, size, size], data)?;
    Dataset::new(images, Some(labels), classes)
}
