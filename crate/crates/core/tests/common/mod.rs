//! Shared test support: an independent f64 mirror of the network forward
//! (the finite-difference oracle), synthetic datasets, and IDX fixtures.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use melius_core::graph::{ArchConfig, BlockStyle, LayerKind, ModelGraph, Param, StemKind};
use melius_core::train::Dataset;
use melius_core::{Tensor, GRAPH_INPUT};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------
// toy architectures
// ---------------------------------------------------------------------

/// Smallest valid four-stage toy: growth 16, one block pair per stage.
/// 32×32 is the minimum input that survives the five spatial halvings.
pub fn toy_arch(input_c: usize, num_classes: usize, groups: usize) -> ArchConfig {
    ArchConfig {
        block_counts: [1, 1, 1, 1],
        growth: 16,
        reductions: [(40, 80), (28, 56), (22, 44)],
        downsample_groups: groups,
        stem: StemKind::Grouped,
        num_classes,
        input_shape: (input_c, 32, 32),
        block_style: BlockStyle::Melius,
    }
}

// ---------------------------------------------------------------------
// synthetic datasets
// ---------------------------------------------------------------------

/// Two linearly separable classes: bright top half vs bright bottom half,
/// with deterministic per-sample noise.
pub fn separable_dataset(n_per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * n_per_class;
    let mut labels = Vec::with_capacity(n);
    let mut images = Tensor::zeros((n, 1, 32, 32));
    for ni in 0..n {
        let class = ni % 2;
        labels.push(class);
        for h in 0..32 {
            for w in 0..32 {
                let bright = if class == 0 { h < 16 } else { h >= 16 };
                let base = if bright { 0.8 } else { -0.8 };
                let noise: f32 = rng.gen_range(-0.2..0.2);
                images.set(ni, 0, h, w, base + noise);
            }
        }
    }
    Dataset::new(images, labels).unwrap()
}

// seven-segment digit masks: A top, B top-right, C bottom-right, D bottom,
// E bottom-left, F top-left, G middle
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],   // 0
    [false, true, true, false, false, false, false], // 1
    [true, true, false, true, true, false, true],  // 2
    [true, true, true, true, false, false, true],  // 3
    [false, true, true, false, false, true, true], // 4
    [true, false, true, true, false, true, true],  // 5
    [true, false, true, true, true, true, true],   // 6
    [true, true, true, false, false, false, false], // 7
    [true, true, true, true, true, true, true],    // 8
    [true, true, true, true, false, true, true],   // 9
];

fn segment_on(digit: usize, row: isize, col: isize) -> bool {
    let seg = &SEGMENTS[digit];
    let within = |r: isize, c: isize, r0: isize, r1: isize, c0: isize, c1: isize| {
        r >= r0 && r < r1 && c >= c0 && c < c1
    };
    (seg[0] && within(row, col, 4, 7, 8, 20))    // A
        || (seg[1] && within(row, col, 4, 14, 17, 20))  // B
        || (seg[2] && within(row, col, 14, 24, 17, 20)) // C
        || (seg[3] && within(row, col, 21, 24, 8, 20))  // D
        || (seg[4] && within(row, col, 14, 24, 8, 11))  // E
        || (seg[5] && within(row, col, 4, 14, 8, 11))   // F
        || (seg[6] && within(row, col, 13, 16, 8, 20))  // G
}

/// Renders `n` noisy, jittered seven-segment digits (cycling classes
/// 0..10) as raw 28×28 u8 pixels plus labels.
pub fn digit_pixels(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 28 * 28);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        labels.push(digit as u8);
        let dy = rng.gen_range(-2i32..=2) as isize;
        let dx = rng.gen_range(-2i32..=2) as isize;
        let ink: i32 = 200 + rng.gen_range(-30..=30);
        for row in 0..28isize {
            for col in 0..28isize {
                let on = segment_on(digit, row - dy, col - dx);
                let noise: i32 = rng.gen_range(0..40);
                let v = if on { ink + rng.gen_range(-20..=20) } else { noise };
                pixels.push(v.clamp(0, 255) as u8);
            }
        }
    }
    (pixels, labels)
}

/// Writes a rank-3 u8 IDX image file.
pub fn write_idx_images(path: &Path, n: usize, h: usize, w: usize, pixels: &[u8]) {
    let mut bytes = vec![0u8, 0, 0x08, 3];
    bytes.extend((n as u32).to_be_bytes());
    bytes.extend((h as u32).to_be_bytes());
    bytes.extend((w as u32).to_be_bytes());
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).unwrap();
}

/// Writes a rank-1 u8 IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) {
    let mut bytes = vec![0u8, 0, 0x08, 1];
    bytes.extend((labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    std::fs::write(path, bytes).unwrap();
}

/// Generates a digit IDX pair (images + labels) under `dir` and returns
/// the two paths.
pub fn write_digit_idx(dir: &Path, prefix: &str, n: usize, seed: u64) -> (std::path::PathBuf, std::path::PathBuf) {
    let (pixels, labels) = digit_pixels(n, seed);
    let img = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    write_idx_images(&img, n, 28, 28, &pixels);
    write_idx_labels(&lbl, &labels);
    (img, lbl)
}

// ---------------------------------------------------------------------
// f64 mirror network: the independent finite-difference oracle
// ---------------------------------------------------------------------

/// Dense f64 tensor for the mirror network.
#[derive(Clone)]
pub struct T64 {
    pub shape: (usize, usize, usize, usize),
    pub data: Vec<f64>,
}

impl T64 {
    pub fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        T64 { shape, data: vec![0.0; shape.0 * shape.1 * shape.2 * shape.3] }
    }

    #[inline]
    fn off(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.1 + c) * self.shape.2 + h) * self.shape.3 + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.off(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let o = self.off(n, c, h, w);
        self.data[o] = v;
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        T64 { shape: t.shape(), data: t.data().iter().map(|&v| v as f64).collect() }
    }
}

/// A self-contained f64 re-implementation of the clamp-surrogate forward:
/// every layer is written as plain loops, independent of the production
/// kernels. Parameters are owned copies, so finite differences can
/// perturb them without touching the graph under test.
pub struct MirrorNet {
    pub params: BTreeMap<String, T64>,
    pub epsilons: BTreeMap<String, f64>,
    pub t_clip: f64,
}

impl MirrorNet {
    pub fn from_graph(graph: &ModelGraph, t_clip: f64) -> Self {
        let mut params = BTreeMap::new();
        for (name, p) in &graph.parameters {
            match p {
                Param::Fp(t) => {
                    params.insert(name.clone(), T64::from_tensor(t));
                }
                Param::Bits(_) => panic!("mirror expects latent weights"),
            }
        }
        let epsilons = graph
            .bn_running
            .iter()
            .map(|(k, v)| (k.clone(), v.epsilon as f64))
            .collect();
        MirrorNet { params, epsilons, t_clip }
    }

    fn clamp(&self, x: &T64) -> T64 {
        let mut out = x.clone();
        for v in out.data.iter_mut() {
            *v = v.clamp(-self.t_clip, self.t_clip);
        }
        out
    }

    fn conv(
        &self,
        x: &T64,
        w: &T64,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> T64 {
        let (n, c, h, wd) = x.shape;
        let (oc, icg, kh, kw) = w.shape;
        let oh = (h + 2 * padding.0 - kh) / stride.0 + 1;
        let ow = (wd + 2 * padding.1 - kw) / stride.1 + 1;
        let ocg = oc / groups;
        assert_eq!(c / groups, icg);
        let mut out = T64::zeros((n, oc, oh, ow));
        for ni in 0..n {
            for o in 0..oc {
                let g = o / ocg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ic in 0..icg {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                                    let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.at(ni, g * icg + ic, iy as usize, ix as usize)
                                        * w.at(o, ic, ky, kx);
                                }
                            }
                        }
                        out.set(ni, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn batchnorm_train(&self, x: &T64, gamma: &T64, beta: &T64, eps: f64) -> T64 {
        let (n, c, h, w) = x.shape;
        let m = (n * h * w) as f64;
        let mut out = T64::zeros(x.shape);
        for ci in 0..c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        let v = x.at(ni, ci, hi, wi);
                        sum += v;
                        sq += v * v;
                    }
                }
            }
            let mean = sum / m;
            let var = (sq / m - mean * mean).max(0.0);
            let inv = 1.0 / (var + eps).sqrt();
            let (g, b) = (gamma.data[ci], beta.data[ci]);
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        out.set(ni, ci, hi, wi, g * (x.at(ni, ci, hi, wi) - mean) * inv + b);
                    }
                }
            }
        }
        out
    }

    fn maxpool(&self, x: &T64, k: (usize, usize), s: (usize, usize), p: (usize, usize)) -> T64 {
        let (n, c, h, w) = x.shape;
        let oh = (h + 2 * p.0 - k.0) / s.0 + 1;
        let ow = (w + 2 * p.1 - k.1) / s.1 + 1;
        let mut out = T64::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..k.0 {
                            for kx in 0..k.1 {
                                let iy = (oy * s.0 + ky) as isize - p.0 as isize;
                                let ix = (ox * s.1 + kx) as isize - p.1 as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    best = best.max(x.at(ni, ci, iy as usize, ix as usize));
                                }
                            }
                        }
                        out.set(ni, ci, oy, ox, best);
                    }
                }
            }
        }
        out
    }

    /// Runs the clamp-surrogate forward over `graph`'s layer list with this
    /// mirror's own parameters and returns mean cross-entropy against
    /// `labels`.
    pub fn loss(&self, graph: &ModelGraph, input: &T64, labels: &[usize]) -> f64 {
        let mut values: Vec<T64> = Vec::with_capacity(graph.layers.len());
        for layer in &graph.layers {
            let get = |id: usize| -> &T64 {
                if id == GRAPH_INPUT {
                    input
                } else {
                    &values[id]
                }
            };
            let x = get(layer.inputs[0]);
            let out = match &layer.kind {
                LayerKind::Sign => self.clamp(x),
                LayerKind::BinaryConv(p) => {
                    let latent = &self.params[&format!("{}.weight", layer.name)];
                    let w = self.clamp(latent);
                    self.conv(x, &w, p.stride, p.padding, p.groups)
                }
                LayerKind::FpConv(p) => {
                    let w = &self.params[&format!("{}.weight", layer.name)];
                    self.conv(x, w, p.stride, p.padding, p.groups)
                }
                LayerKind::BatchNorm { .. } => {
                    let gamma = &self.params[&format!("{}.gamma", layer.name)];
                    let beta = &self.params[&format!("{}.beta", layer.name)];
                    let eps = self.epsilons[&layer.name];
                    self.batchnorm_train(x, gamma, beta, eps)
                }
                LayerKind::MaxPool { kernel, stride, padding } => {
                    self.maxpool(x, *kernel, *stride, *padding)
                }
                LayerKind::GlobalAvgPool => {
                    let (n, c, h, w) = x.shape;
                    let mut out = T64::zeros((n, c, 1, 1));
                    for ni in 0..n {
                        for ci in 0..c {
                            let mut sum = 0.0;
                            for hi in 0..h {
                                for wi in 0..w {
                                    sum += x.at(ni, ci, hi, wi);
                                }
                            }
                            out.set(ni, ci, 0, 0, sum / (h * w) as f64);
                        }
                    }
                    out
                }
                LayerKind::ChannelShuffle { groups } => {
                    let (n, c, h, w) = x.shape;
                    let per = c / groups;
                    let mut out = T64::zeros(x.shape);
                    for g in 0..*groups {
                        for r in 0..per {
                            let (src, dst) = (g * per + r, r * groups + g);
                            for ni in 0..n {
                                for hi in 0..h {
                                    for wi in 0..w {
                                        out.set(ni, dst, hi, wi, x.at(ni, src, hi, wi));
                                    }
                                }
                            }
                        }
                    }
                    out
                }
                LayerKind::Concat => {
                    let b = get(layer.inputs[1]);
                    let (n, ca, h, w) = x.shape;
                    let cb = b.shape.1;
                    let mut out = T64::zeros((n, ca + cb, h, w));
                    for ni in 0..n {
                        for ci in 0..ca + cb {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let v = if ci < ca {
                                        x.at(ni, ci, hi, wi)
                                    } else {
                                        b.at(ni, ci - ca, hi, wi)
                                    };
                                    out.set(ni, ci, hi, wi, v);
                                }
                            }
                        }
                    }
                    out
                }
                LayerKind::SliceAdd { tail } => {
                    let d = get(layer.inputs[1]);
                    let (n, c, h, w) = x.shape;
                    let base = c - tail;
                    let mut out = x.clone();
                    for ni in 0..n {
                        for ti in 0..*tail {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let v = out.at(ni, base + ti, hi, wi) + d.at(ni, ti, hi, wi);
                                    out.set(ni, base + ti, hi, wi, v);
                                }
                            }
                        }
                    }
                    out
                }
                LayerKind::FullyConnected { in_features, out_features } => {
                    let w = &self.params[&format!("{}.weight", layer.name)];
                    let b = &self.params[&format!("{}.bias", layer.name)];
                    let n = x.shape.0;
                    let mut out = T64::zeros((n, *out_features, 1, 1));
                    for ni in 0..n {
                        for ki in 0..*out_features {
                            let mut acc = b.data[ki];
                            for ci in 0..*in_features {
                                acc += x.at(ni, ci, 0, 0) * w.at(ki, ci, 0, 0);
                            }
                            out.set(ni, ki, 0, 0, acc);
                        }
                    }
                    out
                }
            };
            values.push(out);
        }
        let logits = values.last().unwrap();
        let (n, k, _, _) = logits.shape;
        let mut total = 0.0;
        for ni in 0..n {
            let row: Vec<f64> = (0..k).map(|ki| logits.at(ni, ki, 0, 0)).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            total += sum.ln() + max - row[labels[ni]];
        }
        total / n as f64
    }
}
