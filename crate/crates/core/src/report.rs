//! PSNR and accuracy, PPM/PGM image output, montages and feature-map dumps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::preprocess;
use crate::error::{Error, Result};
use crate::net::{Checkpoint, Mode, Network};
use crate::tensor::Tensor;

/// Reported PSNR for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `10·log10(255² / mse)`, or [`PSNR_CAP`] when `mse < 255²·10^−9.9`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    let peak = 255.0f64 * 255.0;
    if mse < peak * 10f64.powf(-PSNR_CAP / 10.0) {
        return PSNR_CAP;
    }
    10.0 * (peak / mse).log10()
}

/// PSNR in dB between raw-domain images.
pub fn psnr(clean: &Tensor<f32>, recon: &Tensor<f32>) -> Result<f64> {
    Ok(psnr_from_mse(clean.mse(recon)?))
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let pred = logits.argmax_rows()?;
    if pred.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Median of a non-empty list; the mean of the middle pair for even
/// lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0, "median of nothing");
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn to_byte(v: f32) -> u8 {
    (v as f64 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn image_dims(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    let s = image.shape();
    match *s {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape(s.to_vec())),
    }
}

/// Binary P6 bytes of a `(3, H, W)` raw-domain image, values rounded half
/// up and clamped to `[0, 255]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = image_dims(image)?;
    if c != 3 {
        return Err(Error::InvalidArgument(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let data = image.data();
    out.reserve(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            out.push(to_byte(data[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Binary P5 bytes of an `h × w` grayscale plane.
pub fn encode_pgm(plane: &[f32], h: usize, w: usize) -> Result<Vec<u8>> {
    if plane.len() != h * w || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("{} values for a {h}x{w} image", plane.len())));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_ppm(image: &Tensor<f32>, path: &Path) -> Result<()> {
    write_bytes(path, &encode_ppm(image)?)
}

/// Grid of equally sized `(3, h, w)` images separated by 2-pixel white
/// lines. Short rows are padded with white.
pub fn montage(rows: &[Vec<Tensor<f32>>]) -> Result<Tensor<f32>> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::InvalidArgument("montage needs at least one image".into()))?;
    let (c, h, w) = image_dims(first)?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (rows.len() * (h + 2) - 2, cols * (w + 2) - 2);
    let mut out = Tensor::full(&[c, gh, gw], 255.0f32)?;
    let data = out.data_mut();
    for (r, row) in rows.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            if image_dims(img)? != (c, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "montage",
                    left: img.shape().to_vec(),
                    right: vec![c, h, w],
                });
            }
            let src = img.data();
            for ch in 0..c {
                for y in 0..h {
                    let dst = ch * gh * gw + (r * (h + 2) + y) * gw + k * (w + 2);
                    data[dst..dst + w].copy_from_slice(&src[(ch * h + y) * w..(ch * h + y + 1) * w]);
                }
            }
        }
    }
    Ok(out)
}

pub fn write_montage(rows: &[Vec<Tensor<f32>>], path: &Path) -> Result<()> {
    write_ppm(&montage(rows)?, path)
}

/// Min-max normalizes one channel to `[0, 255]`; a constant channel maps
/// to 128.
pub fn normalize_channel(values: &[f32]) -> Vec<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![128.0; values.len()];
    }
    let scale = 255.0 / (hi as f64 - lo as f64);
    values.iter().map(|&v| ((v as f64 - lo as f64) * scale) as f32).collect()
}

/// Writes one P5 image per channel of `activation` (`(1, C, H, W)` or
/// `(C, H, W)`) as `{prefix}_c{index:03}.pgm`, plus `index.tsv` with a
/// `channel<TAB>filename` line per channel.
pub fn write_feature_maps(activation: &Tensor<f32>, prefix: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (c, h, w) = image_dims(activation)?;
    fs::create_dir_all(out_dir)?;
    let plane = h * w;
    let mut index = String::new();
    let mut paths = Vec::with_capacity(c);
    for ch in 0..c {
        let name = format!("{prefix}_c{ch:03}.pgm");
        let values = normalize_channel(&activation.data()[ch * plane..(ch + 1) * plane]);
        let path = out_dir.join(&name);
        write_bytes(&path, &encode_pgm(&values, h, w)?)?;
        index.push_str(&format!("{ch}\t{name}\n"));
        paths.push(path);
    }
    write_bytes(&out_dir.join("index.tsv"), index.as_bytes())?;
    Ok(paths)
}

/// Runs `image` (raw pixels, `(3, H, W)` or `(1, 3, H, W)`) through the
/// checkpointed network in inference mode and dumps activation `layer`.
pub fn dump_feature_maps(ckpt: &Checkpoint, image: &Tensor<f32>, layer: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (c, h, w) = image_dims(image)?;
    let x = image.clone().reshape(&[1, c, h, w])?;
    let x = preprocess(&x, &ckpt.norm)?;
    let net = Network::new(ckpt.spec.clone())?;
    let trace = match net.relu_index(layer) {
        Ok(_) => net.forward_until(&ckpt.params, &x, Mode::Infer, layer)?,
        Err(_) => net.forward(&ckpt.params, &x, Mode::Infer)?,
    };
    let act = trace.require(layer)?;
    write_feature_maps(act, &layer.replace('.', "_"), out_dir)
}
