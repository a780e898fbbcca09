use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / N` with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits {:?} with {} labels", s, labels.len()),
        ));
    }
    let (n, k) = (s[0], s[1]);
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for {} classes",
            bad, k
        )));
    }
    let x = logits.data();
    let mut grad = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    let mut probs = vec![0.0f64; k];
    for (i, &label) in labels.iter().enumerate() {
        let row = &x[i * k..(i + 1) * k];
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, v) in probs.iter_mut().zip(row) {
            *p = (v.as_f64() - max).exp();
            z += *p;
        }
        loss += z.ln() - (row[label].as_f64() - max);
        for (j, p) in probs.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(T::from_f64((p / z - onehot) / n as f64));
        }
    }
    Ok((loss / n as f64, Tensor::from_vec(s, grad)?))
}

/// Index of the largest logit per row (lowest index on ties).
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
