//! Strided 2-D convolution and its transpose, lowered to im2col + GEMM.
//!
//! Convolution is cross-correlation (no kernel flip). A transposed
//! convolution with weight `(Cin, Cout, kh, kw)` is exactly the adjoint of a
//! convolution with the same weight tensor read as `(O = Cin, I = Cout)`,
//! which is what lets the decoder invert the encoder's geometry.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Mat, Tensor};

/// Output extent of a convolution: `floor((input + 2·pad − kernel)/stride) + 1`.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Geometry("stride and kernel must be positive".into()));
    }
    if input + 2 * pad < kernel {
        return Err(Error::Geometry(format!(
            "input {input} with pad {pad} is smaller than kernel {kernel}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Output extent of a transposed convolution: `(input − 1)·stride − 2·pad + kernel`.
pub fn deconv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return Err(Error::Geometry(
            "stride, kernel and input must be positive".into(),
        ));
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * pad {
        return Err(Error::Geometry(format!(
            "transposed conv of {input} (k={kernel}, s={stride}, p={pad}) has no output"
        )));
    }
    Ok(full - 2 * pad)
}

/// Borrowed view of a convolution layer's parameters.
///
/// For [`conv2d_forward`] the weight is `(O, I, kh, kw)` and the bias has
/// `O` entries; for [`deconv2d_forward`] the weight is `(Cin, Cout, kh, kw)`
/// and the bias has `Cout` entries. Padding is symmetric.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams<'a, T: Element> {
    pub weight: &'a Tensor<T>,
    pub bias: Option<&'a Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T: Element> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy)]
struct Geom {
    channels: usize,
    src_h: usize,
    src_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
}

impl Geom {
    fn cols(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Unfolds one `(C, H, W)` image into a `(C·kh·kw) × (grid_h·grid_w)` matrix.
fn im2col<T: Element>(src: &[T], g: Geom, cols: &mut [T]) {
    let p = g.pad as isize;
    let plane = g.cols();
    for c in 0..g.channels {
        let img = &src[c * g.src_h * g.src_w..(c + 1) * g.src_h * g.src_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * plane;
                for oy in 0..g.grid_h {
                    let dst = &mut cols[row + oy * g.grid_w..row + (oy + 1) * g.grid_w];
                    let iy = (oy * g.stride + ki) as isize - p;
                    if iy < 0 || iy >= g.src_h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &img[iy as usize * g.src_w..(iy as usize + 1) * g.src_w];
                    let (lo, hi) = valid_span(g, kj);
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                    } else {
                        for (d, &v) in dst[lo..hi].iter_mut().zip(src_row[start..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose kernel tap `kj` lands inside the image.
fn valid_span(g: Geom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = (g.src_w + g.pad).saturating_sub(kj).div_ceil(g.stride).min(g.grid_w);
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: scatters columns back into a zeroed image.
fn col2im<T: Element>(cols: &[T], g: Geom, dst: &mut [T]) {
    dst.fill(T::zero());
    let p = g.pad as isize;
    let plane = g.cols();
    for c in 0..g.channels {
        let img = &mut dst[c * g.src_h * g.src_w..(c + 1) * g.src_h * g.src_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * plane;
                for oy in 0..g.grid_h {
                    let iy = (oy * g.stride + ki) as isize - p;
                    if iy < 0 || iy >= g.src_h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.grid_w..row + (oy + 1) * g.grid_w];
                    let dst_row = &mut img[iy as usize * g.src_w..(iy as usize + 1) * g.src_w];
                    let (lo, hi) = valid_span(g, kj);
                    if lo == hi {
                        continue;
                    }
                    let start = lo * g.stride + kj - g.pad;
                    for (d, &v) in dst_row[start..].iter_mut().step_by(g.stride).zip(&src[lo..hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn weight_dims<T: Element>(w: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    w.dims4()
        .map_err(|_| Error::InvalidArgument(format!("conv weight must be rank 4, got {:?}", w.shape())))
}

fn check_bias<T: Element>(bias: Option<&Tensor<T>>, len: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [len] {
            return Err(Error::ShapeMismatch {
                op,
                left: b.shape().to_vec(),
                right: vec![len],
            });
        }
    }
    Ok(())
}

fn add_bias<T: Element>(out: &mut [T], bias: Option<&Tensor<T>>, channels: usize, plane: usize) {
    if let Some(b) = bias {
        for (ch, chunk) in out.chunks_exact_mut(plane).enumerate() {
            let v = b.data()[ch % channels];
            chunk.iter_mut().for_each(|x| *x += v);
        }
    }
}

fn channel_sums<T: Element>(t: &Tensor<T>, channels: usize, plane: usize) -> Tensor<T> {
    let mut acc = vec![0.0f64; channels];
    for (i, chunk) in t.data().chunks_exact(plane).enumerate() {
        acc[i % channels] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    Tensor::new(&[channels], acc.into_iter().map(T::from_f64).collect())
        .expect("channel count is positive")
}

fn conv_geom<T: Element>(x: &Tensor<T>, p: &ConvParams<'_, T>) -> Result<(usize, usize, Geom)> {
    let (_, ci, h, w) = x.dims4()?;
    let (o, wi, kh, kw) = weight_dims(p.weight)?;
    if wi != ci {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x.shape().to_vec(),
            right: p.weight.shape().to_vec(),
        });
    }
    check_bias(p.bias, o, "conv2d bias")?;
    let ho = conv_output_size(h, kh, p.stride, p.pad)?;
    let wo = conv_output_size(w, kw, p.stride, p.pad)?;
    let g = Geom {
        channels: ci,
        src_h: h,
        src_w: w,
        kh,
        kw,
        stride: p.stride,
        pad: p.pad,
        grid_h: ho,
        grid_w: wo,
    };
    Ok((o, ci * kh * kw, g))
}

pub fn conv2d_forward<T: Element>(x: &Tensor<T>, p: &ConvParams<'_, T>) -> Result<Tensor<T>> {
    let (n, _, _, _) = x.dims4()?;
    let (o, ckk, g) = conv_geom(x, p)?;
    let plane = g.cols();
    let mut out = Tensor::zeros(&[n, o, g.grid_h, g.grid_w])?;
    let mut cols = vec![T::zero(); ckk * plane];
    let in_stride = x.numel() / n;
    for (item, dst) in out.data_mut().chunks_exact_mut(o * plane).enumerate() {
        im2col(&x.data()[item * in_stride..(item + 1) * in_stride], g, &mut cols);
        gemm(Mat::N(p.weight.data(), o, ckk), Mat::N(&cols, ckk, plane), T::zero(), dst);
    }
    add_bias(out.data_mut(), p.bias, o, plane);
    Ok(out)
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    p: &ConvParams<'_, T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (n, _, _, _) = x.dims4()?;
    let (o, ckk, g) = conv_geom(x, p)?;
    let expected = [n, o, g.grid_h, g.grid_w];
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: grad_out.shape().to_vec(),
            right: expected.to_vec(),
        });
    }
    let plane = g.cols();
    let in_stride = x.numel() / n;
    let mut grad_x = x.zeros_like();
    let mut grad_w = p.weight.zeros_like();
    let mut cols = vec![T::zero(); ckk * plane];
    let mut gcols = vec![T::zero(); ckk * plane];
    for item in 0..n {
        let xi = &x.data()[item * in_stride..(item + 1) * in_stride];
        let gi = &grad_out.data()[item * o * plane..(item + 1) * o * plane];
        im2col(xi, g, &mut cols);
        gemm(Mat::N(gi, o, plane), Mat::T(&cols, ckk, plane), T::one(), grad_w.data_mut());
        gemm(Mat::T(p.weight.data(), o, ckk), Mat::N(gi, o, plane), T::zero(), &mut gcols);
        col2im(&gcols, g, &mut grad_x.data_mut()[item * in_stride..(item + 1) * in_stride]);
    }
    Ok(ConvGrads {
        x: grad_x,
        weight: grad_w,
        bias: channel_sums(grad_out, o, plane),
    })
}

/// Geometry of the convolution that a transposed convolution is the adjoint
/// of: the "source image" is the deconv output, the grid is the deconv input.
fn deconv_geom<T: Element>(x: &Tensor<T>, p: &ConvParams<'_, T>) -> Result<(usize, usize, Geom)> {
    let (_, ci, h, w) = x.dims4()?;
    let (wi, co, kh, kw) = weight_dims(p.weight)?;
    if wi != ci {
        return Err(Error::ShapeMismatch {
            op: "deconv2d",
            left: x.shape().to_vec(),
            right: p.weight.shape().to_vec(),
        });
    }
    check_bias(p.bias, co, "deconv2d bias")?;
    let ho = deconv_output_size(h, kh, p.stride, p.pad)?;
    let wo = deconv_output_size(w, kw, p.stride, p.pad)?;
    let g = Geom {
        channels: co,
        src_h: ho,
        src_w: wo,
        kh,
        kw,
        stride: p.stride,
        pad: p.pad,
        grid_h: h,
        grid_w: w,
    };
    Ok((ci, co * kh * kw, g))
}

pub fn deconv2d_forward<T: Element>(x: &Tensor<T>, p: &ConvParams<'_, T>) -> Result<Tensor<T>> {
    let (n, _, h, w) = x.dims4()?;
    let (ci, ckk, g) = deconv_geom(x, p)?;
    let co = g.channels;
    let out_plane = g.src_h * g.src_w;
    let mut out = Tensor::zeros(&[n, co, g.src_h, g.src_w])?;
    let mut cols = vec![T::zero(); ckk * h * w];
    for (item, dst) in out.data_mut().chunks_exact_mut(co * out_plane).enumerate() {
        let xi = &x.data()[item * ci * h * w..(item + 1) * ci * h * w];
        gemm(Mat::T(p.weight.data(), ci, ckk), Mat::N(xi, ci, h * w), T::zero(), &mut cols);
        col2im(&cols, g, dst);
    }
    add_bias(out.data_mut(), p.bias, co, out_plane);
    Ok(out)
}

pub fn deconv2d_backward<T: Element>(
    x: &Tensor<T>,
    p: &ConvParams<'_, T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (n, _, h, w) = x.dims4()?;
    let (ci, ckk, g) = deconv_geom(x, p)?;
    let co = g.channels;
    let expected = [n, co, g.src_h, g.src_w];
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "deconv2d_backward",
            left: grad_out.shape().to_vec(),
            right: expected.to_vec(),
        });
    }
    let out_plane = g.src_h * g.src_w;
    let plane = h * w;
    let mut grad_x = x.zeros_like();
    let mut grad_w = p.weight.zeros_like();
    let mut gcols = vec![T::zero(); ckk * plane];
    for item in 0..n {
        let gi = &grad_out.data()[item * co * out_plane..(item + 1) * co * out_plane];
        let xi = &x.data()[item * ci * plane..(item + 1) * ci * plane];
        im2col(gi, g, &mut gcols);
        gemm(
            Mat::N(p.weight.data(), ci, ckk),
            Mat::N(&gcols, ckk, plane),
            T::zero(),
            &mut grad_x.data_mut()[item * ci * plane..(item + 1) * ci * plane],
        );
        gemm(Mat::N(xi, ci, plane), Mat::T(&gcols, ckk, plane), T::one(), grad_w.data_mut());
    }
    Ok(ConvGrads {
        x: grad_x,
        weight: grad_w,
        bias: channel_sums(grad_out, co, out_plane),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn output_sizes() {
        assert_eq!(conv_output_size(29, 3, 2, 1).unwrap(), 15);
        assert_eq!(conv_output_size(29, 3, 1, 1).unwrap(), 29);
        assert_eq!(deconv_output_size(15, 3, 2, 1).unwrap(), 29);
        assert_eq!(deconv_output_size(29, 3, 1, 1).unwrap(), 29);
        assert!(conv_output_size(1, 5, 1, 1).is_err());
        assert!(conv_output_size(5, 3, 0, 1).is_err());
        assert!(deconv_output_size(1, 1, 1, 1).is_err());
    }

    #[test]
    fn shape_inversion_odd_sizes() {
        for h in (5..=129).step_by(2) {
            let down = conv_output_size(h, 3, 2, 1).unwrap();
            assert_eq!(deconv_output_size(down, 3, 2, 1).unwrap(), h, "H={h}");
            assert_eq!(conv_output_size(h, 3, 1, 1).unwrap(), h);
            assert_eq!(deconv_output_size(h, 3, 1, 1).unwrap(), h);
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::<f64>::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        w.data_mut()[4] = 1.0;
        let p = ConvParams { weight: &w, bias: None, stride: 1, pad: 1 };
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn conv_known_values() {
        // 1x1x3x3 ramp with an all-ones 2x2 kernel, no padding
        let x = Tensor::<f64>::new(&[1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let w = Tensor::ones(&[1, 1, 2, 2]).unwrap();
        let b = Tensor::full(&[1], 0.5).unwrap();
        let p = ConvParams { weight: &w, bias: Some(&b), stride: 1, pad: 0 };
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[8.5, 12.5, 20.5, 24.5]);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = Rng::new(4);
        let x: Tensor<f64> = rng.gaussian(&[2, 3, 7, 7], 0.0, 1.0).unwrap();
        let w: Tensor<f64> = rng.gaussian(&[4, 3, 3, 3], 0.0, 1.0).unwrap();
        let p = ConvParams { weight: &w, bias: None, stride: 2, pad: 1 };
        let g = Tensor::zeros(&[2, 4, 4, 4]).unwrap();
        let grads = conv2d_backward(&x, &p, &g).unwrap();
        assert!(grads.x.data().iter().all(|&v| v == 0.0));
        assert!(grads.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));

        let y: Tensor<f64> = rng.gaussian(&[2, 4, 4, 4], 0.0, 1.0).unwrap();
        let dg = Tensor::zeros(&[2, 3, 7, 7]).unwrap();
        let grads = deconv2d_backward(&y, &p, &dg).unwrap();
        assert!(grads.x.data().iter().all(|&v| v == 0.0));
        assert!(grads.weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_bias_is_channel_sum() {
        let mut rng = Rng::new(8);
        let x: Tensor<f64> = rng.gaussian(&[3, 2, 5, 5], 0.0, 1.0).unwrap();
        let w: Tensor<f64> = rng.gaussian(&[4, 2, 3, 3], 0.0, 1.0).unwrap();
        let p = ConvParams { weight: &w, bias: None, stride: 1, pad: 1 };
        let g: Tensor<f64> = rng.gaussian(&[3, 4, 5, 5], 0.0, 1.0).unwrap();
        let grads = conv2d_backward(&x, &p, &g).unwrap();
        for o in 0..4 {
            let mut s = 0.0;
            for n in 0..3 {
                for i in 0..25 {
                    s += g.data()[(n * 4 + o) * 25 + i];
                }
            }
            assert!((grads.bias.data()[o] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Tensor::<f32>::zeros(&[1, 2, 5, 5]).unwrap();
        let w = Tensor::<f32>::zeros(&[3, 4, 3, 3]).unwrap();
        let p = ConvParams { weight: &w, bias: None, stride: 1, pad: 1 };
        assert!(matches!(conv2d_forward(&x, &p), Err(Error::ShapeMismatch { .. })));
        let w = Tensor::<f32>::zeros(&[3, 2, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[2]).unwrap();
        let p = ConvParams { weight: &w, bias: Some(&b), stride: 1, pad: 1 };
        assert!(conv2d_forward(&x, &p).is_err());
        let p = ConvParams { weight: &w, bias: None, stride: 1, pad: 1 };
        let g = Tensor::<f32>::zeros(&[1, 3, 4, 4]).unwrap();
        assert!(conv2d_backward(&x, &p, &g).is_err());
    }

    /// Direct seven-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, _, kh, kw) = w.dims4().unwrap();
        let ho = conv_output_size(h, kh, stride, pad).unwrap();
        let wo = conv_output_size(wd, kw, stride, pad).unwrap();
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * ci + c) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    proptest::proptest! {
        #[test]
        fn matches_direct_convolution(
            seed in 0u64..1000,
            k in 1usize..5,
            stride in 1usize..4,
            pad in 0usize..3,
            h in 4usize..10,
            w in 4usize..10,
        ) {
            let mut rng = Rng::new(seed);
            let x: Tensor<f64> = rng.gaussian(&[2, 3, h, w], 0.0, 1.0).unwrap();
            let wt: Tensor<f64> = rng.gaussian(&[4, 3, k, k], 0.0, 1.0).unwrap();
            let p = ConvParams { weight: &wt, bias: None, stride, pad };
            let y = conv2d_forward(&x, &p).unwrap();
            for (a, b) in y.data().iter().zip(naive_conv(&x, &wt, stride, pad)) {
                proptest::prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
