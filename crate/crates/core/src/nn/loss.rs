use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − onehot)/N` with respect to the logits.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let mut grad = logits.zeros_like();
    let mut total = 0.0;
    for ((row, g), &label) in logits
        .data()
        .chunks_exact(k)
        .zip(grad.data_mut().chunks_exact_mut(k))
        .zip(labels)
    {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - row[label].as_f64();
        for (j, (gv, e)) in g.iter_mut().zip(&exps).enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            *gv = T::from_f64((e / z - onehot) / n as f64);
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "softmax_cross_entropy" });
    }
    Ok((loss, grad))
}

/// Gradient of `mse(prediction, target)` with respect to `prediction`.
pub fn mse_backward<T: Element>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    prediction.ensure_same_shape(target, "mse_backward")?;
    let scale = 2.0 / prediction.numel() as f64;
    let mut out = prediction.zeros_like();
    for ((o, &p), &t) in out.data_mut().iter_mut().zip(prediction.data()).zip(target.data()) {
        *o = T::from_f64(scale * (p.as_f64() - t.as_f64()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::zeros(&[4, 10]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 9, 5]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logit_gives_zero_loss() {
        let mut logits = Tensor::<f64>::zeros(&[1, 10]).unwrap();
        logits.data_mut()[7] = 1e4;
        let (loss, grad) = softmax_cross_entropy(&logits, &[7]).unwrap();
        assert!(loss < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Tensor::<f64>::new(&[2, 3], vec![0.1, -2.0, 1.5, 3.0, 0.0, -1.0]).unwrap();
        let (_, grad) = softmax_cross_entropy(&logits, &[2, 1]).unwrap();
        for row in grad.data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f32>::zeros(&[1, 3]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }
}
