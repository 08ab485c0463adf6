//! Losses and evaluation metrics.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Sequence mean-squared error `E = (1/N) Σ_n ½‖pred_n − target_n‖²`.
///
/// Returns the loss and `∂E/∂pred_n = (pred_n − target_n)/N`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::Contract(format!(
            "prediction is {}x{} but target is {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    if pred.rows() == 0 {
        return Err(Error::Contract("empty prediction sequence".into()));
    }
    let n = pred.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let e = p - t;
        loss += 0.5 * e * e;
        *g = e / n;
    }
    Ok((loss / n, grad))
}

/// Softmax cross-entropy of one logit vector against a class index.
///
/// Returns the loss and `softmax(logits) − onehot(label)`.
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::Contract(format!(
            "cross-entropy needs at least two classes, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(Error::Contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let grad = logits
        .iter()
        .enumerate()
        .map(|(k, &l)| (l - lse).exp() - if k == label { 1.0 } else { 0.0 })
        .collect();
    Ok((lse - logits[label], grad))
}

/// Root-mean-square error divided by the root-mean-square of the target.
pub fn nrmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "nrmse needs equal non-empty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let scale: f64 = target.iter().map(|t| t * t).sum::<f64>() / n;
    if scale == 0.0 {
        return Err(Error::Domain("nrmse is undefined for an all-zero target".into()));
    }
    Ok((mse / scale).sqrt())
}

/// Index of the largest entry (first one on ties).
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}
