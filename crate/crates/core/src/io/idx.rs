//! IDX container ingestion (the MNIST-style format): big-endian magic and
//! dimensions, 8-bit pixel payload.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::Dataset;

const DTYPE_U8: u8 = 0x08;

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::parse(at, format!("truncated IDX file while reading {what}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_be_bytes(b))
    }
}

/// Raw IDX tensor: dims plus u8 payload.
struct IdxFile {
    dims: Vec<usize>,
    data: Vec<u8>,
}

fn read_idx(path: &Path, expect_ndim: &[usize]) -> Result<IdxFile> {
    let file = File::open(path)?;
    let mut r = Cursor { inner: BufReader::new(file), offset: 0 };
    let magic = r.u32_be("magic")?;
    let dtype = ((magic >> 8) & 0xff) as u8;
    let ndim = (magic & 0xff) as usize;
    if magic >> 16 != 0 || dtype != DTYPE_U8 {
        return Err(Error::parse(
            0,
            format!("bad IDX magic {magic:#010x}: expected zero prefix and u8 dtype"),
        ));
    }
    if !expect_ndim.contains(&ndim) {
        return Err(Error::parse(
            0,
            format!("IDX rank {ndim} unsupported here (expected one of {expect_ndim:?})"),
        ));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut len = 1usize;
    for _ in 0..ndim {
        let at = r.offset;
        let d = r.u32_be("dimension")? as usize;
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::parse(at, format!("IDX dimension overflow at {d}")))?;
        dims.push(d);
    }
    let mut data = vec![0u8; len];
    r.read_exact(&mut data, "pixel payload")?;
    Ok(IdxFile { dims, data })
}

/// Loads an images/labels IDX pair into a normalized dataset.
///
/// Pixels are scaled to [0, 1] and then standardized per channel with the
/// dataset's own mean and standard deviation. Images may be rank 3
/// (n, h, w — single channel) or rank 4 (n, c, h, w); labels are rank 1.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx(images_path, &[3, 4])?;
    let labels = read_idx(labels_path, &[1])?;
    let (n, c, h, w) = match images.dims.as_slice() {
        [n, h, w] => (*n, 1usize, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        _ => unreachable!("rank checked by read_idx"),
    };
    if labels.dims[0] != n {
        return Err(Error::invalid_input(format!(
            "IDX pair mismatch: {n} images but {} labels",
            labels.dims[0]
        )));
    }
    let mut tensor = Tensor::zeros((n, c, h, w));
    for (dst, &src) in tensor.data_mut().iter_mut().zip(&images.data) {
        *dst = src as f32 / 255.0;
    }
    normalize_per_channel(&mut tensor);
    let labels = labels.data.iter().map(|&l| l as usize).collect();
    Dataset::new(tensor, labels)
}

/// In-place channel-wise standardization: subtract the mean, divide by the
/// standard deviation (skipped for degenerate constant channels).
pub fn normalize_per_channel(t: &mut Tensor) {
    let (n, c, h, w) = t.shape();
    let m = (n * h * w) as f64;
    if m == 0.0 {
        return;
    }
    for ci in 0..c {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let v = t.at(ni, ci, hi, wi) as f64;
                    sum += v;
                    sq += v * v;
                }
            }
        }
        let mean = sum / m;
        let std = (sq / m - mean * mean).max(0.0).sqrt();
        let inv = if std > 1e-8 { 1.0 / std } else { 1.0 };
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let v = (t.at(ni, ci, hi, wi) as f64 - mean) * inv;
                    t.set(ni, ci, hi, wi, v as f32);
                }
            }
        }
    }
}
