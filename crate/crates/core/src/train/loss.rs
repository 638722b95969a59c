//! Softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{GradTensor, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits. Numerically stabilized by max subtraction; sums run in
/// f64 so the loss is finite-difference clean.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, GradTensor)> {
    let (n, k, h, w) = logits.shape();
    if h != 1 || w != 1 {
        return Err(Error::contract(format!(
            "cross_entropy_loss: expected n×k×1×1 logits, got {:?}",
            logits.shape()
        )));
    }
    if labels.len() != n {
        return Err(Error::contract(format!(
            "cross_entropy_loss: {n} rows but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::invalid_input("cross_entropy_loss: empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid_input(format!(
            "cross_entropy_loss: label {bad} out of range for {k} classes"
        )));
    }
    let mut grad = Tensor::zeros((n, k, 1, 1));
    let mut total = 0.0f64;
    for ni in 0..n {
        let row: Vec<f64> = (0..k).map(|ki| logits.at(ni, ki, 0, 0) as f64).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let log_sum = sum.ln() + max;
        total += log_sum - row[labels[ni]];
        for ki in 0..k {
            let softmax = exps[ki] / sum;
            let target = if ki == labels[ni] { 1.0 } else { 0.0 };
            grad.set(ni, ki, 0, 0, ((softmax - target) / n as f64) as f32);
        }
    }
    Ok((total / n as f64, grad))
}
