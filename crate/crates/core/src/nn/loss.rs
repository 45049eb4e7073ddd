//! Classification and reconstruction losses. Loss values are computed in
//! f64 regardless of the tensor precision; gradients come back in `T`.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Default replacement for log(0) in the reverse cross-entropy term.
pub const DEFAULT_LOG_CLAMP: f64 = -4.0;

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    /// dLoss/dInput, same shape as the input.
    pub grad: Tensor<T>,
}

fn batch_dims<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(usize, usize)> {
    match *logits.shape() {
        [b, k] if b == labels.len() && b > 0 => {
            if let Some(&y) = labels.iter().find(|&&y| y as usize >= k) {
                return Err(Error::InvalidArgument(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            Ok((b, k))
        }
        _ => Err(Error::Shape(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        ))),
    }
}

/// Row-wise softmax in f64.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// -log softmax(row)[y], accurate for confident rows.
fn nll(row: &[f64], y: usize) -> f64 {
    let (imax, m) = row.iter().copied().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
    );
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != imax)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    m + rest.ln_1p() - row[y]
}

/// Mean negative log-likelihood of the labels under the softmax.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<LossOutput<T>> {
    symmetric_cross_entropy(logits, labels, 1.0, 0.0, DEFAULT_LOG_CLAMP)
}

/// `alpha * CE + beta * RCE`, where the reverse term uses the one-hot label as
/// the predicted distribution and replaces log(0) by `log_clamp`.
pub fn symmetric_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    alpha: f64,
    beta: f64,
    log_clamp: f64,
) -> Result<LossOutput<T>> {
    let (b, k) = batch_dims(logits, labels)?;
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::InvalidArgument("alpha and beta must be non-negative".into()));
    }
    if log_clamp >= 0.0 {
        return Err(Error::InvalidArgument("log clamp must be negative".into()));
    }
    let probs = softmax_rows(logits);
    let inv_b = 1.0 / b as f64;
    let mut ce = 0.0;
    let mut rce = 0.0;
    let mut grad = Vec::with_capacity(b * k);
    for (i, p) in probs.iter().enumerate() {
        let y = labels[i] as usize;
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
        ce += nll(&row, y);
        // RCE = -sum_j p_j log q_j = -A (1 - p_y)
        rce += -log_clamp * (1.0 - p[y]);
        for j in 0..k {
            let delta = if j == y { 1.0 } else { 0.0 };
            let g_ce = p[j] - delta;
            let g_rce = log_clamp * p[y] * (delta - p[j]);
            grad.push(T::lit((alpha * g_ce + beta * g_rce) * inv_b));
        }
    }
    let loss = if beta == 0.0 {
        alpha * ce * inv_b
    } else {
        (alpha * ce + beta * rce) * inv_b
    };
    Ok(LossOutput {
        loss,
        grad: Tensor::from_vec(&[b, k], grad)?,
    })
}

/// Mean squared error over every element.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossOutput<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p.as_f64() - t.as_f64();
        loss += d * d;
        grad.push(T::lit(2.0 * d / n));
    }
    Ok(LossOutput {
        loss: loss / n,
        grad: Tensor::from_vec(pred.shape(), grad)?,
    })
}
