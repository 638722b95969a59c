//! Batch normalization with per-channel affine.
//!
//! Training mode normalizes by batch statistics (biased variance over the
//! n·h·w positions of each channel) and folds them into the running
//! estimates with `running = momentum·running + (1−momentum)·batch`.
//! Inference mode normalizes by the running estimates. Moment sums are
//! accumulated in f64 so small-batch gradients stay finite-difference clean.

use crate::error::{Error, Result};
use crate::tensor::{GradTensor, Tensor};

/// Per-channel normalization state.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
    pub momentum: f32,
}

impl BatchNormState {
    /// Identity-initialized state: gamma 1, beta 0, mean 0, var 1.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: 1e-5,
            momentum: 0.9,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().1 != self.channels() {
            return Err(Error::contract(format!(
                "batchnorm: input has {} channels, state has {}",
                x.shape().1,
                self.channels()
            )));
        }
        Ok(())
    }
}

/// Intermediates cached by the training-mode forward for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    /// Normalized pre-affine values (x − μ)/√(σ² + ε).
    pub x_hat: Tensor,
    /// Per-channel 1/√(σ² + ε).
    pub inv_std: Vec<f32>,
}

/// Inference-mode forward using running statistics.
pub fn batchnorm_forward(x: &Tensor, s: &BatchNormState) -> Result<Tensor> {
    s.check(x)?;
    let (n, c, h, w) = x.shape();
    let mut out = Tensor::zeros((n, c, h, w));
    for ci in 0..c {
        let inv = 1.0 / (s.running_var[ci] + s.epsilon).sqrt();
        let (g, b, m) = (s.gamma[ci], s.beta[ci], s.running_mean[ci]);
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    out.set(ni, ci, hi, wi, g * (x.at(ni, ci, hi, wi) - m) * inv + b);
                }
            }
        }
    }
    Ok(out)
}

/// Training-mode forward: batch statistics, running-stat update, and the
/// cache needed by [`batchnorm_backward`].
pub fn batchnorm_forward_train(x: &Tensor, s: &mut BatchNormState) -> Result<(Tensor, BnCache)> {
    s.check(x)?;
    let (n, c, h, w) = x.shape();
    let m = n * h * w;
    if m == 0 {
        return Err(Error::invalid_input(
            "batchnorm: zero-size batch in training mode",
        ));
    }
    let mut out = Tensor::zeros((n, c, h, w));
    let mut x_hat = Tensor::zeros((n, c, h, w));
    let mut inv_std = vec![0.0f32; c];
    for ci in 0..c {
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let v = x.at(ni, ci, hi, wi) as f64;
                    sum += v;
                    sum_sq += v * v;
                }
            }
        }
        let mean = sum / m as f64;
        let var = (sum_sq / m as f64 - mean * mean).max(0.0);
        let inv = 1.0 / (var + s.epsilon as f64).sqrt();
        inv_std[ci] = inv as f32;
        let (g, b) = (s.gamma[ci] as f64, s.beta[ci] as f64);
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let xh = (x.at(ni, ci, hi, wi) as f64 - mean) * inv;
                    x_hat.set(ni, ci, hi, wi, xh as f32);
                    out.set(ni, ci, hi, wi, (g * xh + b) as f32);
                }
            }
        }
        s.running_mean[ci] =
            (s.momentum as f64 * s.running_mean[ci] as f64 + (1.0 - s.momentum as f64) * mean) as f32;
        s.running_var[ci] =
            (s.momentum as f64 * s.running_var[ci] as f64 + (1.0 - s.momentum as f64) * var) as f32;
    }
    Ok((out, BnCache { x_hat, inv_std }))
}

/// Gradients with respect to the input and the affine parameters.
///
/// Returns (grad_x, grad_gamma, grad_beta). Uses the batch-statistics
/// backward, i.e. the derivative of the training-mode forward.
pub fn batchnorm_backward(
    upstream: &GradTensor,
    s: &BatchNormState,
    cache: &BnCache,
) -> Result<(GradTensor, Vec<f32>, Vec<f32>)> {
    cache.x_hat.check_same_shape(upstream, "batchnorm_backward")?;
    let (n, c, h, w) = upstream.shape();
    let m = (n * h * w) as f64;
    let mut gx = Tensor::zeros((n, c, h, w));
    let mut g_gamma = vec![0.0f32; c];
    let mut g_beta = vec![0.0f32; c];
    for ci in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let dy = upstream.at(ni, ci, hi, wi) as f64;
                    sum_dy += dy;
                    sum_dy_xhat += dy * cache.x_hat.at(ni, ci, hi, wi) as f64;
                }
            }
        }
        g_beta[ci] = sum_dy as f32;
        g_gamma[ci] = sum_dy_xhat as f32;
        let scale = s.gamma[ci] as f64 * cache.inv_std[ci] as f64;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let dy = upstream.at(ni, ci, hi, wi) as f64;
                    let xh = cache.x_hat.at(ni, ci, hi, wi) as f64;
                    let dx = scale * (dy - sum_dy / m - xh * sum_dy_xhat / m);
                    gx.set(ni, ci, hi, wi, dx as f32);
                }
            }
        }
    }
    Ok((gx, g_gamma, g_beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(i: usize) -> f32 {
        ((i as f32) * 0.37197).sin()
    }

    #[test]
    fn identity_on_standardized_input() {
        // Construct a channel that is exactly zero-mean unit-variance.
        let vals = [-1.0f32, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
        let x = Tensor::new((2, 1, 2, 2), vals.to_vec()).unwrap();
        let mut s = BatchNormState::new(1);
        let (y, _) = batchnorm_forward_train(&x, &mut s).unwrap();
        for i in 0..x.len() {
            assert!((y.data()[i] - x.data()[i]).abs() <= 1e-4);
        }
    }

    #[test]
    fn constant_channel_collapses_to_beta() {
        let x = Tensor::new((2, 1, 2, 2), vec![7.5; 8]).unwrap();
        let mut s = BatchNormState::new(1);
        s.beta[0] = -3.25;
        let (y, _) = batchnorm_forward_train(&x, &mut s).unwrap();
        for &v in y.data() {
            assert!((v - -3.25).abs() <= 1e-4, "got {v}");
        }
    }

    #[test]
    fn output_moments_match_affine() {
        let x = Tensor::from_fn((4, 3, 5, 5), |n, c, h, w| {
            pseudo(n * 331 + c * 101 + h * 13 + w) * 2.0 + c as f32
        });
        let mut s = BatchNormState::new(3);
        s.gamma = vec![0.5, 1.5, 2.0];
        s.beta = vec![-1.0, 0.25, 3.0];
        let (y, _) = batchnorm_forward_train(&x, &mut s).unwrap();
        let (n, c, h, w) = y.shape();
        let m = (n * h * w) as f64;
        for ci in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        let v = y.at(ni, ci, hi, wi) as f64;
                        sum += v;
                        sq += v * v;
                    }
                }
            }
            let mean = sum / m;
            let var = sq / m - mean * mean;
            assert!((mean - s.beta[ci] as f64).abs() <= 1e-3, "mean {mean}");
            assert!(
                (var - (s.gamma[ci] as f64).powi(2)).abs() <= 1e-3 * (s.gamma[ci] as f64).powi(2).max(1.0),
                "var {var}"
            );
        }
    }

    #[test]
    fn zero_batch_is_invalid_input() {
        let x = Tensor::zeros((0, 3, 2, 2));
        let mut s = BatchNormState::new(3);
        assert!(matches!(
            batchnorm_forward_train(&x, &mut s),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = Tensor::from_fn((2, 2, 3, 3), |n, c, h, w| pseudo(n + c * 9 + h * 3 + w));
        let mut s = BatchNormState::new(2);
        let (_, cache) = batchnorm_forward_train(&x, &mut s).unwrap();
        let up = Tensor::zeros(x.shape());
        let (gx, gg, gb) = batchnorm_backward(&up, &s, &cache).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gg.iter().all(|&v| v == 0.0));
        assert!(gb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_beta_is_per_channel_sum_of_upstream() {
        let x = Tensor::from_fn((2, 3, 4, 4), |n, c, h, w| pseudo(n * 3 + c * 7 + h + w * 2));
        let up = Tensor::from_fn((2, 3, 4, 4), |n, c, h, w| pseudo(n + c * 11 + h * 5 + w + 3));
        let mut s = BatchNormState::new(3);
        let (_, cache) = batchnorm_forward_train(&x, &mut s).unwrap();
        let (_, _, gb) = batchnorm_backward(&up, &s, &cache).unwrap();
        for ci in 0..3 {
            let mut sum = 0.0f64;
            for ni in 0..2 {
                for hi in 0..4 {
                    for wi in 0..4 {
                        sum += up.at(ni, ci, hi, wi) as f64;
                    }
                }
            }
            assert!((gb[ci] as f64 - sum).abs() <= 1e-4, "channel {ci}");
        }
    }

    /// Finite-difference check of the input gradient on a 2×3×4×4 tensor.
    /// Loss is a fixed random projection of the output; the oracle
    /// recomputes the full forward in f64 at perturbed inputs.
    #[test]
    fn input_gradient_matches_finite_differences() {
        let shape = (2usize, 3usize, 4usize, 4usize);
        let x = Tensor::from_fn(shape, |n, c, h, w| pseudo(n * 53 + c * 17 + h * 5 + w) * 1.5);
        let proj = Tensor::from_fn(shape, |n, c, h, w| pseudo(n * 7 + c * 29 + h * 3 + w + 11));
        let gamma = [0.8f64, 1.2, -0.6];
        let beta = [0.1f64, -0.3, 0.7];
        let eps = 1e-5f64;

        // f64 forward + projection loss, independent of the production code
        let loss = |data: &[f32]| -> f64 {
            let (n, c, h, w) = shape;
            let m = (n * h * w) as f64;
            let at = |ni: usize, ci: usize, hi: usize, wi: usize| {
                data[((ni * c + ci) * h + hi) * w + wi] as f64
            };
            let mut total = 0.0f64;
            for ci in 0..c {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            let v = at(ni, ci, hi, wi);
                            sum += v;
                            sq += v * v;
                        }
                    }
                }
                let mean = sum / m;
                let var = sq / m - mean * mean;
                let inv = 1.0 / (var + eps).sqrt();
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            let xh = (at(ni, ci, hi, wi) - mean) * inv;
                            total += (gamma[ci] * xh + beta[ci]) * proj.at(ni, ci, hi, wi) as f64;
                        }
                    }
                }
            }
            total
        };

        let mut s = BatchNormState::new(3);
        s.gamma = gamma.iter().map(|&v| v as f32).collect();
        s.beta = beta.iter().map(|&v| v as f32).collect();
        let (_, cache) = batchnorm_forward_train(&x, &mut s).unwrap();
        let (gx, _, _) = batchnorm_backward(&proj, &s, &cache).unwrap();

        let h_step = 1e-3f32;
        for i in (0..x.len()).step_by(7) {
            let mut plus = x.data().to_vec();
            plus[i] += h_step;
            let mut minus = x.data().to_vec();
            minus[i] -= h_step;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h_step as f64);
            let got = gx.data()[i] as f64;
            let denom = fd.abs().max(got.abs()).max(1e-3);
            assert!(
                (fd - got).abs() / denom <= 1e-2,
                "idx {i}: fd {fd} vs analytic {got}"
            );
        }
    }
}
