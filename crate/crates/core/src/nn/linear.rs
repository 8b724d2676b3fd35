//! Global average pooling and the fully connected layer used by classifier
//! and probe heads.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Mat, Tensor};

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
        .collect();
    Tensor::new(&[n, c], data)
}

/// Spreads `grad_out` of shape `(N, C)` evenly over each `H×W` plane.
pub fn global_avg_pool_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = *input_shape else {
        return Err(Error::InvalidArgument(format!("expected rank-4 input shape, got {input_shape:?}")));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_backward",
            left: grad_out.shape().to_vec(),
            right: vec![n, c],
        });
    }
    let plane = h * w;
    let scale = T::from_f64(1.0 / plane as f64);
    let mut out = Tensor::zeros(input_shape)?;
    for (dst, &g) in out.data_mut().chunks_exact_mut(plane).zip(grad_out.data()) {
        dst.fill(g * scale);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T: Element> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn linear_dims<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let n = x.shape()[0];
    let f = x.numel() / n;
    let (k, wf) = weight.dims2()?;
    if wf != f || bias.shape() != [k] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    Ok((n, f, k))
}

/// `y = x·Wᵀ + b` with `x` flattened to `(N, F)` and `W` of shape `(K, F)`.
pub fn linear_forward<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f, k) = linear_dims(x, weight, bias)?;
    let mut out = Tensor::zeros(&[n, k])?;
    gemm(Mat::N(x.data(), n, f), Mat::T(weight.data(), k, f), T::zero(), out.data_mut());
    for row in out.data_mut().chunks_exact_mut(k) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, f, k) = linear_dims(x, weight, bias)?;
    if grad_out.shape() != [n, k] {
        return Err(Error::ShapeMismatch {
            op: "linear_backward",
            left: grad_out.shape().to_vec(),
            right: vec![n, k],
        });
    }
    let mut gx = x.zeros_like();
    gemm(Mat::N(grad_out.data(), n, k), Mat::N(weight.data(), k, f), T::zero(), gx.data_mut());
    let mut gw = weight.zeros_like();
    gemm(Mat::T(grad_out.data(), n, k), Mat::N(x.data(), n, f), T::zero(), gw.data_mut());
    let mut gb = vec![0.0f64; k];
    for row in grad_out.data().chunks_exact(k) {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc += v.as_f64();
        }
    }
    Ok(LinearGrads {
        x: gx,
        weight: gw,
        bias: Tensor::new(&[k], gb.into_iter().map(T::from_f64).collect())?,
    })
}
