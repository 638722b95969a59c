//! Channel shuffle: interleaves group slices so a following grouped
//! convolution mixes features created by different groups.

use crate::error::{Error, Result};
use crate::tensor::{GradTensor, Tensor};

/// Permutes channels: output channel `r·groups + g` receives input channel
/// `g·(c/groups) + r`. Spatial data is untouched.
pub fn channel_shuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.shape();
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid_input(format!(
            "channel_shuffle: {c} channels not divisible by {groups} groups"
        )));
    }
    let per = c / groups;
    let mut out = Tensor::zeros((n, c, h, w));
    for g in 0..groups {
        for r in 0..per {
            let src = g * per + r;
            let dst = r * groups + g;
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        out.set(ni, dst, hi, wi, x.at(ni, src, hi, wi));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`channel_shuffle`]: the inverse permutation, which is a
/// shuffle with the transposed group count.
pub fn channel_shuffle_backward(upstream: &GradTensor, groups: usize) -> Result<GradTensor> {
    let c = upstream.shape().1;
    channel_shuffle(upstream, c / groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_tensor(c: usize) -> Tensor {
        Tensor::from_fn((1, c, 1, 1), |_, ci, _, _| ci as f32)
    }

    #[test]
    fn interleaves_two_groups_of_two() {
        let y = channel_shuffle(&channel_tensor(4), 2).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0, 1.0, 3.0]);
    }

    #[test]
    fn one_group_is_identity() {
        let x = channel_tensor(6);
        assert_eq!(channel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn transposed_shuffle_inverts() {
        for &(c, g) in &[(12usize, 3usize), (8, 4), (16, 2)] {
            let x = Tensor::from_fn((2, c, 2, 2), |n, ci, h, w| {
                (n * 1000 + ci * 10 + h * 2 + w) as f32
            });
            let once = channel_shuffle(&x, g).unwrap();
            let back = channel_shuffle(&once, c / g).unwrap();
            assert_eq!(back, x, "c={c} g={g}");
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let x = channel_tensor(12);
        let y = channel_shuffle(&x, 4).unwrap();
        let mut seen: Vec<f32> = y.data().to_vec();
        seen.sort_by(f32::total_cmp);
        let want: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(seen, want);
    }

    #[test]
    fn indivisible_channels_rejected() {
        assert!(matches!(
            channel_shuffle(&channel_tensor(5), 2),
            Err(Error::InvalidInput(_))
        ));
    }
}
