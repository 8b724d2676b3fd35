//! Dense row-major tensors of rank 1 to 4.
//!
//! Activations use the `(N, C, H, W)` layout and convolution weights use
//! `(O, I, Kh, Kw)`. Nothing broadcasts: every binary op requires equal
//! shapes and reports a [`Error::ShapeMismatch`] otherwise.

use std::fmt::{self, Debug};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Storage precision tag, also used as the checkpoint dtype byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Scalar types a [`Tensor`] can hold: `f32` for training, `f64` for
/// gradient checks.
pub trait Element:
    Float + Default + Debug + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = a · b + beta · c` for an `m×k` by `k×n` product, with explicit
    /// row/column strides for `a` and `b` and a row-major `c`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    (rows as isize - 1) * rs + (cols as isize - 1) * cs
                };
                if k > 0 {
                    assert!(last(m, k, rsa, csa) < a.len() as isize, "gemm: lhs too short");
                    assert!(last(k, n, rsb, csb) < b.len() as isize, "gemm: rhs too short");
                }
                assert!(c.len() >= m * n, "gemm: output too short");
                // SAFETY: all indices touched are bounded by the asserts above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, DType::F32, matrixmultiply::sgemm);
impl_element!(f64, DType::F64, matrixmultiply::dgemm);

/// Matrix operand view for [`gemm`]: row-major storage, optionally
/// read transposed.
#[derive(Clone, Copy)]
pub(crate) enum Mat<'a, T> {
    /// `rows × cols` row-major.
    N(&'a [T], usize, usize),
    /// The transpose of a row-major `rows × cols` matrix, i.e. a
    /// `cols × rows` operand.
    T(&'a [T], usize, usize),
}

impl<'a, T: Element> Mat<'a, T> {
    fn dims(&self) -> (usize, usize) {
        match *self {
            Mat::N(_, r, c) => (r, c),
            Mat::T(_, r, c) => (c, r),
        }
    }

    fn strides(&self) -> (&'a [T], isize, isize) {
        match *self {
            Mat::N(d, _, c) => (d, c as isize, 1),
            Mat::T(d, _, c) => (d, 1, c as isize),
        }
    }
}

/// `out = a · b + beta · out`.
pub(crate) fn gemm<T: Element>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T]) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    debug_assert_eq!(k, k2, "gemm inner dims");
    let (ad, rsa, csa) = a.strides();
    let (bd, rsb, csb) = b.strides();
    T::gemm_raw(m, k, n, ad, rsa, csa, bd, rsb, csb, beta, out);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape(shape.to_vec()))
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let numel = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let numel = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::InvalidArgument(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidArgument(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn finite_or(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .finite_or(op)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.ensure_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op: "add_assign" })
        }
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
        .finite_or("scale")
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Inner product `⟨a, b⟩` accumulated in double precision.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    /// Mean squared error `(1/numel) Σ (a − b)²`, accumulated in double
    /// precision.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other, "mse")?;
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum();
        let out = total / self.numel() as f64;
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::NonFinite { op: "mse" })
        }
    }

    /// Per-channel mean and biased variance over `(N, H, W)` of a rank-4
    /// tensor.
    pub fn channel_mean_var(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = self.dims4()?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        for img in self.data.chunks_exact(c * plane) {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += img[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for img in self.data.chunks_exact(c * plane) {
            for (ch, v) in var.iter_mut().enumerate() {
                let m = mean[ch];
                *v += img[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|x| {
                        let d = x.as_f64() - m;
                        d * d
                    })
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        Ok((mean, var))
    }

    /// Index of the largest value along the last axis of a rank-2 tensor;
    /// ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (_, k) = self.dims2()?;
        Ok(self
            .data
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Equal shapes and `|a − b| ≤ atol + rtol·|b|` componentwise.
    pub fn allclose(&self, other: &Self, rtol: f64, atol: f64) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| {
                let (a, b) = (a.as_f64(), b.as_f64());
                (a - b).abs() <= atol + rtol * b.abs()
            })
    }

    /// Copy of item `i` along the leading axis, keeping a leading dim of 1.
    pub fn item(&self, i: usize) -> Result<Self> {
        let n = self.shape[0];
        if i >= n {
            return Err(Error::InvalidArgument(format!(
                "item {i} out of range for leading dim {n}"
            )));
        }
        let stride = self.numel() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Tensor {
            shape,
            data: self.data[i * stride..(i + 1) * stride].to_vec(),
        })
    }

    /// Gathers items along the leading axis.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.shape[0];
        let stride = self.numel() / n;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= n {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of range for leading dim {n}"
                )));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn add_small() {
        let a = Tensor::<f32>::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut rng = Rng::new(3);
        let x: Tensor<f32> = rng.gaussian(&[2, 3, 4, 4], 0.0, 1.0).unwrap();
        assert_eq!(x.add(&x.zeros_like()).unwrap(), x);
    }

    #[test]
    fn add_matches_scalar_loop() {
        let mut rng = Rng::new(11);
        let a: Tensor<f32> = rng.gaussian(&[2, 3, 4, 4], 0.0, 1.0).unwrap();
        let b: Tensor<f32> = rng.gaussian(&[2, 3, 4, 4], 0.0, 1.0).unwrap();
        let out = a.add(&b).unwrap();
        for i in 0..a.numel() {
            assert_eq!(out.data()[i], a.data()[i] + b.data()[i]);
        }
    }

    #[test]
    fn add_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[3, 2]).unwrap();
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn add_reports_overflow() {
        let a = Tensor::<f32>::full(&[1], f32::MAX).unwrap();
        assert!(matches!(a.add(&a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn mse_cases() {
        let a = Tensor::<f32>::new(&[2], vec![0.0, 0.0]).unwrap();
        let b = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.mse(&b).unwrap(), 12.5);
        assert_eq!(b.mse(&b).unwrap(), 0.0);
        assert!(a.mse(&Tensor::zeros(&[3]).unwrap()).is_err());
    }

    #[test]
    fn mse_matches_loop() {
        let mut rng = Rng::new(5);
        let a: Tensor<f32> = rng.gaussian(&[4, 3, 5, 5], 0.0, 2.0).unwrap();
        let b: Tensor<f32> = rng.gaussian(&[4, 3, 5, 5], 1.0, 2.0).unwrap();
        let mut acc = 0.0f64;
        for i in 0..a.numel() {
            let d = a.data()[i] as f64 - b.data()[i] as f64;
            acc += d * d;
        }
        acc /= a.numel() as f64;
        assert!((a.mse(&b).unwrap() - acc).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::zeros(&[]).is_err());
        assert!(Tensor::<f32>::zeros(&[1, 2, 3, 4, 5]).is_err());
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn channel_stats() {
        // image 0: ch0 = 0 1 2 3, ch1 = 5 5 5 5; image 1: ch0 = 4 5 6 7, ch1 = 5 5 5 5
        let data = vec![
            0., 1., 2., 3., 5., 5., 5., 5., //
            4., 5., 6., 7., 5., 5., 5., 5.,
        ];
        let x = Tensor::<f64>::new(&[2, 2, 2, 2], data).unwrap();
        let (mean, var) = x.channel_mean_var().unwrap();
        assert_eq!(mean, vec![3.5, 5.0]);
        // Σ (k − 3.5)² for k = 0..8 is 42
        assert_eq!(var, vec![42.0 / 8.0, 0.0]);
    }

    #[test]
    fn argmax_ties_pick_first() {
        let t = Tensor::<f32>::new(&[2, 3], vec![1.0, 3.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(t.argmax_rows().unwrap(), vec![1, 0]);
    }

    #[test]
    fn gemm_transposed_operands() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        gemm(Mat::N(&a, 2, 3), Mat::N(&b, 3, 2), 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // aᵀ · a is 3x3
        let mut d = [0.0f64; 9];
        gemm(Mat::T(&a, 2, 3), Mat::N(&a, 2, 3), 0.0, &mut d);
        assert_eq!(d, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    proptest! {
        #[test]
        fn add_commutes(values in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            let n = values.len();
            let a = Tensor::new(&[n], values.clone()).unwrap();
            let b = Tensor::new(&[n], values.iter().rev().copied().collect()).unwrap();
            prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
        }
    }
}
