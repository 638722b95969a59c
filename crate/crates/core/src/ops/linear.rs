//! Fully connected classifier head.

use crate::error::{Error, Result};
use crate::tensor::{GradTensor, Tensor};

/// y = x·Wᵀ + b for x of shape n×c×1×1, weights k×c, bias k.
/// Output shape n×k×1×1.
pub fn fully_connected(x: &Tensor, w: &Tensor, b: &[f32]) -> Result<Tensor> {
    let (n, c, h, wd) = x.shape();
    if h != 1 || wd != 1 {
        return Err(Error::contract(format!(
            "fully_connected: expected n×c×1×1 input, got {:?}",
            x.shape()
        )));
    }
    let (k, wc, wh, ww) = w.shape();
    if wc != c || wh != 1 || ww != 1 || b.len() != k {
        return Err(Error::contract(format!(
            "fully_connected: weight shape {:?} / bias {} inconsistent with {c} inputs",
            w.shape(),
            b.len()
        )));
    }
    let mut out = Tensor::zeros((n, k, 1, 1));
    for ni in 0..n {
        for ki in 0..k {
            let mut acc = b[ki] as f64;
            for ci in 0..c {
                acc += x.at(ni, ci, 0, 0) as f64 * w.at(ki, ci, 0, 0) as f64;
            }
            out.set(ni, ki, 0, 0, acc as f32);
        }
    }
    Ok(out)
}

/// Gradients of [`fully_connected`]: (grad_x, grad_w, grad_b).
pub fn fully_connected_backward(
    x: &Tensor,
    w: &Tensor,
    upstream: &GradTensor,
) -> Result<(GradTensor, GradTensor, Vec<f32>)> {
    let (n, c, _, _) = x.shape();
    let k = w.shape().0;
    if upstream.shape() != (n, k, 1, 1) {
        return Err(Error::contract(format!(
            "fully_connected backward: upstream shape {:?}, expected {:?}",
            upstream.shape(),
            (n, k, 1, 1)
        )));
    }
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = vec![0.0f32; k];
    for ni in 0..n {
        for ki in 0..k {
            let up = upstream.at(ni, ki, 0, 0);
            gb[ki] += up;
            for ci in 0..c {
                let go = gx.offset(ni, ci, 0, 0);
                gx.data_mut()[go] += up * w.at(ki, ci, 0, 0);
                let wo = gw.offset(ki, ci, 0, 0);
                gw.data_mut()[wo] += up * x.at(ni, ci, 0, 0);
            }
        }
    }
    Ok((gx, gw, gb))
}
