use mabvit_tensor::{Tensor, TensorError};

use crate::error::{Error, Result};

/// Mean over the batch of `-sum(q * log_softmax(logits))` with
/// `q = (1 - smoothing) * onehot + smoothing / C`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(TensorError::InvalidShape {
            op: "cross_entropy",
            shape: s.to_vec(),
            msg: format!("expected {} x classes logits", labels.len()),
        }
        .into());
    }
    let (b, c) = (s[0], s[1]);
    let off = smoothing / c as f64;
    let mut q = vec![off; b * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::LabelOutOfRange { label: l, classes: c });
        }
        q[i * c + l] += 1.0 - smoothing;
    }
    let q = Tensor::new(q, &[b, c])?;
    Ok(logits.log_softmax_last()?.mul(&q)?.sum().scale(-1.0 / b as f64))
}

/// Number of rows whose arg-max (first on ties) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            best == l
        })
        .count()
}
