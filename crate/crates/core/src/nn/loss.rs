use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over a `[B, classes]` batch and its gradient
/// with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [b, classes] = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::input(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::input(format!("label {l} at index {i} outside 0..{classes}")));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * classes];
    for (i, (row, &label)) in logits.data().chunks(classes).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_denom = denom.ln() + max;
        loss += log_denom - row[label];
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (gj, v) in g.iter_mut().zip(row) {
            *gj = (v - log_denom).exp() / b as f64;
        }
        g[label] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, Tensor::from_vec(&[b, classes], grad)?))
}

/// Index of the largest logit per row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let [_, classes] = logits.dims2()?;
    Ok(logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
