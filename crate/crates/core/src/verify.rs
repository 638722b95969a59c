//! Randomized self-verification: the property suite behind `verify` in the
//! CLI. Exercises the xnor kernel against the 32-bit reference, bit
//! packing round trips, and the sign/STE oracles.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ops::{conv2d_reference, conv2d_xnor, ConvParams};
use crate::tensor::{pack_bits, sign_forward, ste_backward, unpack_bits, Tensor};

/// Outcome of a verification run.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub trials: usize,
    pub checks: usize,
    pub failures: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn random_sign_tensor(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
}

/// Runs `trials` randomized xnor-vs-reference convolution cases over the
/// channel/kernel/stride/padding/groups sweep, plus the sign and STE
/// elementwise oracles (10,000 scalars including the clip boundary) and
/// pack/unpack round trips across word-boundary channel counts.
pub fn run_verification(trials: usize, seed: u64) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut checks = 0usize;

    // sign/STE oracles on 10k scalars with boundary cases mixed in
    let t_clip = 1.3f32;
    let mut values: Vec<f32> = (0..10_000).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
    values.extend_from_slice(&[0.0, 1.3, -1.3, 1.3 + 1e-6, -1.3 - 1e-6, 1e-9, -1e-9]);
    let n = values.len();
    let x = Tensor::new((1, n, 1, 1), values.clone()).expect("finite");
    let upstream = Tensor::from_fn((1, n, 1, 1), |_, c, _, _| (c as f32 * 0.137).sin() + 0.5);
    let bits = sign_forward(&x);
    let dense = unpack_bits(&bits);
    let ste = ste_backward(&x, &upstream, t_clip).expect("shapes match");
    for i in 0..n {
        checks += 2;
        let want_sign = if values[i] >= 0.0 { 1.0 } else { -1.0 };
        if dense.data()[i] != want_sign {
            failures.push(format!("sign oracle mismatch at value {}", values[i]));
        }
        let want_ste = if values[i].abs() <= t_clip { upstream.data()[i] } else { 0.0 };
        if ste.data()[i] != want_ste {
            failures.push(format!("ste oracle mismatch at value {}", values[i]));
        }
    }

    // pack/unpack round trips across word-boundary channel counts
    for &c in &[1usize, 63, 64, 65, 100, 160] {
        checks += 1;
        let t = random_sign_tensor(&mut rng, (2, c, 3, 3));
        let packed = pack_bits(&t).expect("inputs are ±1");
        if !packed.pads_are_zero() {
            failures.push(format!("pad bits nonzero for c={c}"));
        }
        if unpack_bits(&packed) != t {
            failures.push(format!("pack round trip failed for c={c}"));
        }
    }

    // randomized xnor-vs-reference sweep
    let channels = [3usize, 64, 65, 160];
    let kernels = [1usize, 3];
    let strides = [1usize, 2];
    let paddings = [0usize, 1];
    let groups = [1usize, 2, 4, 8];
    for trial in 0..trials {
        checks += 1;
        let c = channels[rng.gen_range(0..channels.len())];
        let k = kernels[rng.gen_range(0..kernels.len())];
        let s = strides[rng.gen_range(0..strides.len())];
        let p = paddings[rng.gen_range(0..paddings.len())];
        let valid: Vec<usize> = groups.iter().copied().filter(|g| c % g == 0).collect();
        let g = valid[rng.gen_range(0..valid.len())];
        let oc = g * rng.gen_range(1..=2);
        let h = rng.gen_range(k..k + 5);
        let w = rng.gen_range(k..k + 5);
        let params = ConvParams::new(c, oc, (k, k)).stride(s).padding(p).groups(g);
        let x = random_sign_tensor(&mut rng, (1, c, h, w));
        let wt = random_sign_tensor(&mut rng, params.weight_shape());
        let xb = pack_bits(&x).expect("±1");
        let wb = pack_bits(&wt).expect("±1");
        let got = match conv2d_xnor(&xb, &wb, &params) {
            Ok(t) => t,
            Err(e) => {
                failures.push(format!("trial {trial}: xnor kernel errored: {e}"));
                continue;
            }
        };
        let want = match conv2d_reference(&x, &wt, &params) {
            Ok(t) => t,
            Err(e) => {
                failures.push(format!("trial {trial}: reference kernel errored: {e}"));
                continue;
            }
        };
        if got != want {
            failures.push(format!(
                "trial {trial}: xnor != reference for c={c} k={k} s={s} p={p} g={g}"
            ));
        }
    }

    VerifyReport { trials, checks, failures }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_trials_pass() {
        let report = run_verification(100, 7);
        assert!(report.passed(), "failures: {:?}", report.failures);
        assert!(report.checks > 10_000);
    }

    #[test]
    fn runs_are_seed_deterministic() {
        let a = run_verification(25, 3);
        let b = run_verification(25, 3);
        assert_eq!(a.checks, b.checks);
        assert_eq!(a.failures, b.failures);
    }
}
