//! Reference and xnor/popcount convolutions.
//!
//! `conv2d_reference` is the plain 32-bit cross-correlation (direct loops,
//! zero padding, grouped). `conv2d_xnor` computes the identical result for
//! ±1 inputs and weights from packed bits: per output position the ±1 dot
//! product over a window is `n_valid − 2·popcount(xor(x, w))`, with padded
//! taps excluded so the result equals the zero-padded reference exactly.

use crate::error::{Error, Result};
use crate::tensor::{BitTensor, GradTensor, Tensor};

/// Convolution geometry. Weights are laid out (out_channels,
/// in_channels/groups, kh, kw).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvParams {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        ConvParams {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::invalid_config("conv: groups must be >= 1"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::invalid_config(format!(
                "conv: channels ({} -> {}) not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid_config("conv: kernel and stride must be >= 1"));
        }
        Ok(())
    }

    /// Shape of the weight tensor for these parameters.
    pub fn weight_shape(&self) -> (usize, usize, usize, usize) {
        (
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        )
    }

    /// Weight element count (= binary weight bits for a 1-bit conv).
    pub fn weight_count(&self) -> usize {
        let (o, i, kh, kw) = self.weight_shape();
        o * i * kh * kw
    }

    /// Output spatial size for an input of (h, w), or an error if the
    /// window does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = out_dim(h, self.kernel.0, self.stride.0, self.padding.0)?;
        let ow = out_dim(w, self.kernel.1, self.stride.1, self.padding.1)?;
        Ok((oh, ow))
    }

    fn check_input(&self, shape: (usize, usize, usize, usize), what: &str) -> Result<()> {
        self.validate()?;
        if shape.1 != self.in_channels {
            return Err(Error::contract(format!(
                "{what}: input has {} channels, params expect {}",
                shape.1, self.in_channels
            )));
        }
        Ok(())
    }
}

pub(crate) fn out_dim(input: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    let padded = input + 2 * p;
    if padded < k {
        return Err(Error::contract(format!(
            "window {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / s + 1)
}

/// Standard 32-bit grouped cross-correlation with zero padding.
pub fn conv2d_reference(x: &Tensor, w: &Tensor, p: &ConvParams) -> Result<Tensor> {
    p.check_input(x.shape(), "conv2d_reference")?;
    if w.shape() != p.weight_shape() {
        return Err(Error::contract(format!(
            "conv2d_reference: weight shape {:?} does not match params {:?}",
            w.shape(),
            p.weight_shape()
        )));
    }
    let (n, _, h, wd) = x.shape();
    let (oh, ow) = p.output_hw(h, wd)?;
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let icg = p.in_channels / p.groups;
    let ocg = p.out_channels / p.groups;

    let mut out = Tensor::zeros((n, p.out_channels, oh, ow));
    for ni in 0..n {
        for oc in 0..p.out_channels {
            let g = oc / ocg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            for ic in 0..icg {
                                acc += x.at(ni, g * icg + ic, iy as usize, ix as usize)
                                    * w.at(oc, ic, ky, kx);
                            }
                        }
                    }
                    out.set(ni, oc, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Exact binary convolution over packed ±1 tensors.
///
/// Bitwise-equal to `conv2d_reference` on the unpacked tensors: padded taps
/// are skipped rather than encoded (zero is not representable in {−1,+1}),
/// and pad bits of both operands are zero, so `valid − 2·popcount(xor)`
/// per tap is the exact ±1 dot product. Output values are integers stored
/// as f32.
pub fn conv2d_xnor(x: &BitTensor, w: &BitTensor, p: &ConvParams) -> Result<Tensor> {
    p.check_input(x.shape(), "conv2d_xnor")?;
    if w.shape() != p.weight_shape() {
        return Err(Error::contract(format!(
            "conv2d_xnor: weight shape {:?} does not match params {:?}",
            w.shape(),
            p.weight_shape()
        )));
    }
    let (n, _, h, wd) = x.shape();
    let (oh, ow) = p.output_hw(h, wd)?;
    let icg = p.in_channels / p.groups;
    let ocg = p.out_channels / p.groups;

    let mut out = Tensor::zeros((n, p.out_channels, oh, ow));
    if p.groups == 1 {
        xnor_group(x, w, p, 0..p.out_channels, &mut out)?;
    } else {
        // Channel runs of a group are not word-aligned in general, so each
        // group's input slice is repacked once up front.
        for g in 0..p.groups {
            let xg = x.slice_channels(g * icg, icg)?;
            xnor_group(&xg, w, p, g * ocg..(g + 1) * ocg, &mut out)?;
        }
    }
    let _ = (n, oh, ow);
    Ok(out)
}

/// Correlates `x` (already sliced to one group's channels) against weight
/// rows `oc_range`, writing into `out`.
fn xnor_group(
    x: &BitTensor,
    w: &BitTensor,
    p: &ConvParams,
    oc_range: std::ops::Range<usize>,
    out: &mut Tensor,
) -> Result<()> {
    let (n, c, h, wd) = x.shape();
    let (oh, ow) = p.output_hw(h, wd)?;
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let wpr = x.words_per_run();
    debug_assert_eq!(wpr, w.words_per_run());

    for ni in 0..n {
        for oc in oc_range.clone() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc: i64 = 0;
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xr = x.run(ni, iy as usize, ix as usize);
                            let wr = w.run(oc, ky, kx);
                            let mut disagree = 0u32;
                            for wi in 0..wpr {
                                disagree += (xr[wi] ^ wr[wi]).count_ones();
                            }
                            acc += c as i64 - 2 * disagree as i64;
                        }
                    }
                    out.set(ni, oc, oy, ox, acc as f32);
                }
            }
        }
    }
    Ok(())
}

/// Gradients of a grouped cross-correlation with respect to its input and
/// weights, given the upstream gradient of the output.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    p: &ConvParams,
    upstream: &GradTensor,
) -> Result<(GradTensor, GradTensor)> {
    p.check_input(x.shape(), "conv2d_backward")?;
    let (n, _, h, wd) = x.shape();
    let (oh, ow) = p.output_hw(h, wd)?;
    if upstream.shape() != (n, p.out_channels, oh, ow) {
        return Err(Error::contract(format!(
            "conv2d_backward: upstream shape {:?}, expected {:?}",
            upstream.shape(),
            (n, p.out_channels, oh, ow)
        )));
    }
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let icg = p.in_channels / p.groups;
    let ocg = p.out_channels / p.groups;

    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    for ni in 0..n {
        for oc in 0..p.out_channels {
            let g = oc / ocg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let up = upstream.at(ni, oc, oy, ox);
                    if up == 0.0 {
                        continue;
                    }
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            for ic in 0..icg {
                                let xi = x.at(ni, g * icg + ic, iy as usize, ix as usize);
                                let wi = w.at(oc, ic, ky, kx);
                                let go = gx.offset(ni, g * icg + ic, iy as usize, ix as usize);
                                gx.data_mut()[go] += up * wi;
                                let wo = gw.offset(oc, ic, ky, kx);
                                gw.data_mut()[wo] += up * xi;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw))
}
