//! Max pooling and global average pooling.

use crate::error::{Error, Result};
use crate::ops::conv::out_dim;
use crate::tensor::{GradTensor, Tensor};

/// Window maximum with −∞ padding sentinel.
pub fn maxpool2d(
    x: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    Ok(maxpool2d_with_argmax(x, kernel, stride, padding)?.0)
}

/// Max pooling that also records the flat input offset of each window
/// maximum (first maximum in scan order wins ties), for the backward pass.
pub fn maxpool2d_with_argmax(
    x: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.shape();
    let oh = out_dim(h, kernel.0, stride.0, padding.0)?;
    let ow = out_dim(w, kernel.1, stride.1, padding.1)?;
    let mut out = Tensor::zeros((n, c, oh, ow));
    let mut argmax = vec![usize::MAX; n * c * oh * ow];
    let mut oi = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_off = usize::MAX;
                    for ky in 0..kernel.0 {
                        let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel.1 {
                            let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = x.at(ni, ci, iy as usize, ix as usize);
                            if v > best {
                                best = v;
                                best_off = x.offset(ni, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    if best_off == usize::MAX {
                        // A fully-padded window can only happen with absurd
                        // padding; treat as a contract violation.
                        return Err(Error::contract(
                            "maxpool: window contains no valid input positions",
                        ));
                    }
                    out.data_mut()[oi] = best;
                    argmax[oi] = best_off;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Scatters the upstream gradient back to each window's argmax position.
pub fn maxpool2d_backward(
    input_shape: (usize, usize, usize, usize),
    argmax: &[usize],
    upstream: &GradTensor,
) -> Result<GradTensor> {
    if upstream.len() != argmax.len() {
        return Err(Error::contract(format!(
            "maxpool backward: upstream has {} elements, argmax {}",
            upstream.len(),
            argmax.len()
        )));
    }
    let mut gx = Tensor::zeros(input_shape);
    for (off, &g) in argmax.iter().zip(upstream.data()) {
        gx.data_mut()[*off] += g;
    }
    Ok(gx)
}

/// Spatial mean per (n, c); output shape n×c×1×1.
pub fn global_avgpool(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.shape();
    let m = (h * w) as f64;
    Tensor::from_fn((n, c, 1, 1), |ni, ci, _, _| {
        let mut sum = 0.0f64;
        for hi in 0..h {
            for wi in 0..w {
                sum += x.at(ni, ci, hi, wi) as f64;
            }
        }
        (sum / m) as f32
    })
}

/// Broadcasts the upstream gradient back over each spatial plane.
pub fn global_avgpool_backward(
    input_shape: (usize, usize, usize, usize),
    upstream: &GradTensor,
) -> Result<GradTensor> {
    let (n, c, h, w) = input_shape;
    if upstream.shape() != (n, c, 1, 1) {
        return Err(Error::contract(format!(
            "global_avgpool backward: upstream shape {:?}, expected {:?}",
            upstream.shape(),
            (n, c, 1, 1)
        )));
    }
    let scale = 1.0 / (h * w) as f32;
    Ok(Tensor::from_fn((n, c, h, w), |ni, ci, _, _| {
        upstream.at(ni, ci, 0, 0) * scale
    }))
}
