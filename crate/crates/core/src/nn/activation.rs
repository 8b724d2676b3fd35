use crate::error::Result;
use crate::tensor::{Element, Tensor};

pub fn relu_forward<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place<T: Element>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    });
}

/// Passes the gradient where `x > 0`; the subgradient at 0 is 0.
///
/// `x` may be either the input or the output of the forward pass, since the
/// two are positive at the same positions.
pub fn relu_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.ensure_same_shape(grad_out, "relu_backward")?;
    let mut out = grad_out.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if !(v > T::zero()) {
            *g = T::zero();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_values() {
        let x = Tensor::<f32>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gradient_at_zero_is_zero() {
        let x = Tensor::<f32>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let g = Tensor::new(&[3], vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 5.0]);
    }
}
