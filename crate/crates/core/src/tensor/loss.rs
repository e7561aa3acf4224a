use super::{Scalar, Tensor, TensorError};

/// Mean softmax cross-entropy over a `batch x classes` logit matrix.
///
/// The returned gradient is `(softmax(logits) - onehot(labels)) / batch`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>), TensorError> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(TensorError::ShapeMismatch {
            layer: "softmax_cross_entropy".into(),
            expected: format!("[{}, classes]", labels.len()),
            found: shape.to_vec(),
        });
    }
    let (n, classes) = (shape[0], shape[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::LabelOutOfRange { label, classes });
    }
    let inv_n = T::one() / T::from_usize(n).expect("batch size");
    let mut grad = Tensor::zeros(shape);
    let mut total = T::zero();
    for ((row, grow), &label) in logits
        .data()
        .chunks_exact(classes)
        .zip(grad.data_mut().chunks_exact_mut(classes))
        .zip(labels)
    {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (g, &z) in grow.iter_mut().zip(row) {
            let e = (z - max).exp();
            *g = e;
            denom = denom + e;
        }
        total = total + (denom.ln() + max - row[label]);
        for g in grow.iter_mut() {
            *g = *g / denom * inv_n;
        }
        grow[label] = grow[label] - inv_n;
    }
    Ok((total * inv_n, grad))
}
