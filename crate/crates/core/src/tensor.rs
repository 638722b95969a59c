//! Dense and bit-packed tensor types plus the binarization primitives.
//!
//! [`Tensor`] is the universal 32-bit float carrier in N×C×H×W row-major
//! layout. [`BitTensor`] stores {−1,+1} values one bit per element, packed
//! channel-major: for each (n, h, w) position the C channel bits occupy
//! `ceil(c/64)` consecutive 64-bit words, LSB first, bit 1 encoding +1.
//! Keeping the channel run contiguous means a convolution window gathers
//! whole words per tap, so xnor/popcount reductions see no per-bit work.
//!
//! Pad bits (the unused tail of each channel run's final word) are always
//! zero. Popcount-based reductions rely on this: xor of two zero pads is
//! zero and contributes nothing.

use crate::error::{Error, Result};

/// Shape of a rank-4 tensor as (n, c, h, w).
pub type Shape = (usize, usize, usize, usize);

/// Dense 32-bit floating-point tensor, row-major n→c→h→w.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

/// Gradient tensor: same layout as [`Tensor`], holding ∂loss/∂value for the
/// co-located value tensor.
pub type GradTensor = Tensor;

impl Tensor {
    /// Builds a tensor from raw data, validating length and finiteness.
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        if data.len() != len {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                len
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid_input(format!(
                "tensor contains non-finite value {bad}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Shape) -> Self {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        Tensor { shape, data: vec![0.0; len] }
    }

    /// Constructor for values already known finite (hot init paths); length
    /// is still enforced.
    pub(crate) fn from_finite(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.0 * shape.1 * shape.2 * shape.3);
        Tensor { shape, data }
    }

    /// Fills a tensor by calling `f(n, c, h, w)` for every position.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let (n, c, h, w) = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        data.push(f(ni, ci, hi, wi));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub(crate) fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.shape.0 && c < self.shape.1 && h < self.shape.2 && w < self.shape.3);
        ((n * self.shape.1 + c) * self.shape.2 + h) * self.shape.3 + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// Returns an error unless both tensors share a shape. `what` names the
    /// offending operation in the error message.
    pub fn check_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::contract(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Number of 64-bit words needed for one channel run of `c` bits.
#[inline]
pub(crate) fn words_per_run(c: usize) -> usize {
    c.div_ceil(64)
}

/// Channel-packed {−1,+1} tensor; bit 1 encodes +1, bit 0 encodes −1.
#[derive(Debug, Clone, PartialEq)]
pub struct BitTensor {
    shape: Shape,
    words: Vec<u64>,
    /// Unused bits in the final word of each channel run; always read as 0.
    pad_bits: u32,
}

impl BitTensor {
    /// All-(−1) tensor (every bit zero) of the given shape.
    pub fn zeros(shape: Shape) -> Self {
        let (n, c, h, w) = shape;
        let wpr = words_per_run(c);
        BitTensor {
            shape,
            words: vec![0u64; n * h * w * wpr],
            pad_bits: (wpr * 64 - c) as u32,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Words of one channel run at position (n, h, w).
    pub fn words_per_run(&self) -> usize {
        words_per_run(self.shape.1)
    }

    pub fn pad_bits(&self) -> u32 {
        self.pad_bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub(crate) fn run_offset(&self, n: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.2 + h) * self.shape.3 + w) * self.words_per_run()
    }

    /// Channel run (the `ceil(c/64)` words) at position (n, h, w).
    #[inline]
    pub fn run(&self, n: usize, h: usize, w: usize) -> &[u64] {
        let off = self.run_offset(n, h, w);
        &self.words[off..off + self.words_per_run()]
    }

    /// Single element as ±1.0.
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let run = self.run(n, h, w);
        let bit = (run[c / 64] >> (c % 64)) & 1;
        if bit == 1 {
            1.0
        } else {
            -1.0
        }
    }

    #[inline]
    pub(crate) fn set_bit(&mut self, n: usize, c: usize, h: usize, w: usize, plus: bool) {
        let off = self.run_offset(n, h, w) + c / 64;
        if plus {
            self.words[off] |= 1u64 << (c % 64);
        } else {
            self.words[off] &= !(1u64 << (c % 64));
        }
    }

    /// Repacks a contiguous channel slice `[start, start + count)` into its
    /// own BitTensor. Used to split grouped convolutions into per-group
    /// channel runs; the slice is gathered bit by bit, so callers should
    /// hoist it out of inner loops.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<BitTensor> {
        let (n, c, h, w) = self.shape;
        if start + count > c {
            return Err(Error::contract(format!(
                "channel slice [{start}, {}) out of range for {c} channels",
                start + count
            )));
        }
        let mut out = BitTensor::zeros((n, count, h, w));
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let src = self.run(ni, hi, wi);
                    let dst_off = out.run_offset(ni, hi, wi);
                    for ci in 0..count {
                        let bit = (src[(start + ci) / 64] >> ((start + ci) % 64)) & 1;
                        if bit == 1 {
                            out.words[dst_off + ci / 64] |= 1u64 << (ci % 64);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// True if every pad bit in every channel run is zero.
    pub fn pads_are_zero(&self) -> bool {
        let (_, c, _, _) = self.shape;
        if c % 64 == 0 {
            return true;
        }
        let wpr = self.words_per_run();
        let mask = !0u64 << (c % 64); // the pad region of the final word
        self.words
            .chunks_exact(wpr)
            .all(|run| run[wpr - 1] & mask == 0)
    }
}

/// Binarizes a tensor: bit +1 exactly where the value is ≥ 0, −1 otherwise.
pub fn sign_forward(x: &Tensor) -> BitTensor {
    let (n, c, h, w) = x.shape();
    let mut out = BitTensor::zeros((n, c, h, w));
    let wpr = out.words_per_run();
    let mut run = vec![0u64; wpr];
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                run.iter_mut().for_each(|v| *v = 0);
                for ci in 0..c {
                    if x.at(ni, ci, hi, wi) >= 0.0 {
                        run[ci / 64] |= 1u64 << (ci % 64);
                    }
                }
                let off = out.run_offset(ni, hi, wi);
                out.words[off..off + wpr].copy_from_slice(&run);
            }
        }
    }
    out
}

/// Straight-through estimator backward: passes `upstream` where
/// |x| ≤ t_clip and zeroes it elsewhere (the |x| = t_clip boundary is
/// inclusive).
pub fn ste_backward(x: &Tensor, upstream: &GradTensor, t_clip: f32) -> Result<GradTensor> {
    x.check_same_shape(upstream, "ste_backward")?;
    if !(t_clip > 0.0) {
        return Err(Error::invalid_input(format!(
            "ste_backward: t_clip must be positive, got {t_clip}"
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&xi, &gi)| if xi.abs() <= t_clip { gi } else { 0.0 })
        .collect();
    Ok(Tensor { shape: x.shape(), data })
}

/// Elementwise STE clip mask as a dense tensor (1 where |x| ≤ t_clip).
pub fn ste_mask(x: &Tensor, t_clip: f32) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&xi| if xi.abs() <= t_clip { 1.0 } else { 0.0 })
        .collect();
    Tensor { shape: x.shape(), data }
}

/// Packs an exactly-±1 tensor into bits. Values other than ±1.0 are
/// rejected; use [`sign_forward`] to binarize arbitrary tensors.
pub fn pack_bits(x: &Tensor) -> Result<BitTensor> {
    if let Some(bad) = x.data().iter().find(|v| v.abs() != 1.0) {
        return Err(Error::invalid_input(format!(
            "pack_bits: value {bad} is not ±1"
        )));
    }
    Ok(sign_forward(x))
}

/// Expands a bit-packed tensor back to dense ±1.0 values.
pub fn unpack_bits(b: &BitTensor) -> Tensor {
    let (n, c, h, w) = b.shape();
    Tensor::from_fn((n, c, h, w), |ni, ci, hi, wi| b.at(ni, ci, hi, wi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1d(values: &[f32]) -> Tensor {
        Tensor::new((1, values.len(), 1, 1), values.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_length_and_nonfinite() {
        assert!(matches!(
            Tensor::new((1, 2, 1, 1), vec![1.0]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            Tensor::new((1, 2, 1, 1), vec![1.0, f32::NAN]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn sign_of_zero_is_plus_one() {
        let b = sign_forward(&t1d(&[0.0]));
        assert_eq!(b.at(0, 0, 0, 0), 1.0);
    }

    #[test]
    fn sign_matches_definition() {
        let b = sign_forward(&t1d(&[-0.3, 2.0, -1e-9]));
        assert_eq!(unpack_bits(&b).data(), &[-1.0, 1.0, -1.0]);
    }

    #[test]
    fn sign_elementwise_oracle_random() {
        let x = Tensor::from_fn((2, 7, 5, 5), |n, c, h, w| {
            // cheap deterministic pseudo-random values in [-1, 1)
            let k = (n * 997 + c * 131 + h * 17 + w * 3) as f32;
            (k * 0.7371).sin()
        });
        let b = sign_forward(&x);
        let u = unpack_bits(&b);
        for (n, c, h, w) in iter_nchw((2, 7, 5, 5)) {
            let expect = if x.at(n, c, h, w) >= 0.0 { 1.0 } else { -1.0 };
            assert_eq!(u.at(n, c, h, w), expect, "mismatch at {:?}", (n, c, h, w));
        }
        assert!(b.pads_are_zero());
    }

    #[test]
    fn ste_boundary_is_inclusive() {
        let g = ste_backward(&t1d(&[1.3]), &t1d(&[5.0]), 1.3).unwrap();
        assert_eq!(g.data(), &[5.0]);
        let g = ste_backward(&t1d(&[-1.31]), &t1d(&[5.0]), 1.3).unwrap();
        assert_eq!(g.data(), &[0.0]);
    }

    #[test]
    fn ste_matches_mask_oracle() {
        let x = Tensor::from_fn((1, 64, 3, 3), |_, c, h, w| {
            ((c * 31 + h * 7 + w) as f32 * 0.1313).sin() * 3.0
        });
        let g = Tensor::from_fn((1, 64, 3, 3), |_, c, h, w| {
            ((c * 13 + h * 3 + w) as f32 * 0.417).cos()
        });
        let out = ste_backward(&x, &g, 1.3).unwrap();
        for i in 0..x.len() {
            let expect = if x.data()[i].abs() <= 1.3 { g.data()[i] } else { 0.0 };
            assert_eq!(out.data()[i], expect);
        }
    }

    #[test]
    fn ste_shape_mismatch_is_contract_error() {
        let err = ste_backward(&t1d(&[1.0]), &t1d(&[1.0, 2.0]), 1.3).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn ste_is_idempotent() {
        let x = t1d(&[0.5, -2.0, 1.3, -1.3, 0.0]);
        let g = t1d(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let once = ste_backward(&x, &g, 1.3).unwrap();
        let twice = ste_backward(&x, &once, 1.3).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn full_word_packs_to_all_ones() {
        let x = Tensor::new((1, 64, 1, 1), vec![1.0; 64]).unwrap();
        let b = pack_bits(&x).unwrap();
        assert_eq!(b.words(), &[u64::MAX]);
        assert_eq!(b.pad_bits(), 0);
    }

    #[test]
    fn pad_region_stays_zero() {
        let x = Tensor::new((1, 65, 1, 1), vec![-1.0; 65]).unwrap();
        let b = pack_bits(&x).unwrap();
        assert_eq!(b.words(), &[0u64, 0u64]);
        assert_eq!(b.pad_bits(), 63);
        assert!(b.pads_are_zero());
    }

    #[test]
    fn pack_rejects_non_sign_values() {
        let err = pack_bits(&t1d(&[1.0, 0.5])).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn round_trip_across_channel_counts() {
        for &c in &[1usize, 63, 64, 100] {
            let x = Tensor::from_fn((2, c, 3, 2), |n, ci, h, w| {
                if (n + ci * 3 + h * 5 + w * 7) % 3 == 0 {
                    1.0
                } else {
                    -1.0
                }
            });
            let b = pack_bits(&x).unwrap();
            assert!(b.pads_are_zero(), "pads nonzero for c={c}");
            assert_eq!(unpack_bits(&b), x, "round trip failed for c={c}");
        }
    }

    #[test]
    fn binarization_is_idempotent_on_its_image() {
        let x = Tensor::from_fn((1, 5, 2, 2), |_, c, h, w| {
            ((c + h + w) as f32 - 3.0) * 0.9
        });
        let once = sign_forward(&x);
        let again = sign_forward(&unpack_bits(&once));
        assert_eq!(once, again);
    }

    #[test]
    fn channel_slice_matches_dense_slice() {
        let x = Tensor::from_fn((1, 100, 2, 2), |_, c, h, w| {
            if (c * 7 + h + w) % 2 == 0 { 1.0 } else { -1.0 }
        });
        let b = pack_bits(&x).unwrap();
        let s = b.slice_channels(30, 41).unwrap();
        assert!(s.pads_are_zero());
        for (n, c, h, w) in iter_nchw((1, 41, 2, 2)) {
            assert_eq!(s.at(n, c, h, w), x.at(n, 30 + c, h, w));
        }
    }

    pub(crate) fn iter_nchw(shape: super::Shape) -> impl Iterator<Item = (usize, usize, usize, usize)> {
        let (n, c, h, w) = shape;
        (0..n).flat_map(move |ni| {
            (0..c).flat_map(move |ci| {
                (0..h).flat_map(move |hi| (0..w).map(move |wi| (ni, ci, hi, wi)))
            })
        })
    }
}
