use super::{shape_err, NnError, Tensor};

/// Row-wise numerically stable log-softmax of a `[batch, classes]` tensor.
pub fn log_softmax(logits: &Tensor) -> Result<Vec<f64>, NnError> {
    if logits.shape().len() != 2 || logits.shape()[1] == 0 {
        return Err(shape_err(format!("logits must be [batch, classes], got {:?}", logits.shape())));
    }
    let k = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

/// Per-sample weighted softmax cross-entropy divided by `divisor`.
///
/// Returns the loss and its gradient with respect to the logits,
/// `w_i (softmax_i − onehot_i) / divisor`.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    weights: &[f64],
    divisor: f64,
) -> Result<(f64, Tensor), NnError> {
    let logp = log_softmax(logits)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n || weights.len() != n {
        return Err(shape_err(format!(
            "{n} logit rows but {} labels and {} weights",
            labels.len(),
            weights.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(shape_err(format!("label {bad} out of range for {k} classes")));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for i in 0..n {
        let row = &logp[i * k..(i + 1) * k];
        let w = weights[i] / divisor;
        loss -= w * row[labels[i]];
        for (j, g) in grad[i * k..(i + 1) * k].iter_mut().enumerate() {
            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
            *g = w * (row[j].exp() - onehot);
        }
    }
    Ok((loss, Tensor::new(&[n, k], grad)?))
}
