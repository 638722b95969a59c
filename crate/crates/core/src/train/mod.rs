//! Desk-scale training: STE backpropagation, Adam/SGD with warmup and
//! cosine decay, deterministic shuffling and augmentation, and weight
//! sign-flip instrumentation.

pub mod backward;
pub mod flips;
pub mod loss;
pub mod optim;

pub use backward::GradMap;
pub use flips::{FlipCounter, FlipSummary};
pub use loss::cross_entropy_loss;
pub use optim::{adam_step, lr_schedule, optimizer_step, sgd_step, OptimizerKind, OptimizerState};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{ExecMode, ModelGraph};
use crate::tensor::Tensor;

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f32,
    pub warmup_epochs: usize,
    pub t_clip: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Horizontal flip (p = 1/2) and 4-pixel pad-and-crop on training
    /// batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            base_lr: 0.002,
            warmup_epochs: 5,
            t_clip: 1.3,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::invalid_config("base_lr must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::invalid_config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_config("batch_size must be >= 1"));
        }
        if !(self.t_clip > 0.0) {
            return Err(Error::invalid_config("t_clip must be positive"));
        }
        Ok(())
    }
}

/// Labeled image set, already normalized to floats.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().0 != labels.len() {
            return Err(Error::invalid_input(format!(
                "dataset: {} images but {} labels",
                images.shape().0,
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// Image shape as (c, h, w).
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.shape();
        (c, h, w)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Zero-pads every image to `target`×`target`, centered. Needed when
    /// the architecture's spatial pipeline wants a larger input than the
    /// stored images (e.g. 28×28 digits into a net that halves five times).
    pub fn pad_spatial(&self, target: usize) -> Result<Dataset> {
        let (n, c, h, w) = self.images.shape();
        if target < h || target < w {
            return Err(Error::invalid_input(format!(
                "pad_spatial: target {target} below image size {h}x{w}"
            )));
        }
        let (oy, ox) = ((target - h) / 2, (target - w) / 2);
        let mut padded = Tensor::zeros((n, c, target, target));
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        padded.set(ni, ci, oy + hi, ox + wi, self.images.at(ni, ci, hi, wi));
                    }
                }
            }
        }
        Dataset::new(padded, self.labels.clone())
    }

    /// Copies the selected samples into a batch, optionally augmenting
    /// each with a horizontal flip (p = 1/2) and a random 4-pixel
    /// pad-and-crop.
    fn gather(&self, idxs: &[usize], aug: Option<&mut ChaCha8Rng>) -> (Tensor, Vec<usize>) {
        let (_, c, h, w) = self.images.shape();
        let mut batch = Tensor::zeros((idxs.len(), c, h, w));
        let labels = idxs.iter().map(|&i| self.labels[i]).collect();
        match aug {
            None => {
                for (bi, &i) in idxs.iter().enumerate() {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                batch.set(bi, ci, hi, wi, self.images.at(i, ci, hi, wi));
                            }
                        }
                    }
                }
            }
            Some(rng) => {
                const PAD: isize = 4;
                for (bi, &i) in idxs.iter().enumerate() {
                    let flip = rng.gen_bool(0.5);
                    let dy = rng.gen_range(0..=2 * PAD);
                    let dx = rng.gen_range(0..=2 * PAD);
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                // position in the padded image this output
                                // pixel samples from
                                let sy = hi as isize + dy - PAD;
                                let sx = wi as isize + dx - PAD;
                                let sx = if flip { w as isize - 1 - sx } else { sx };
                                let v = if sy >= 0
                                    && sy < h as isize
                                    && sx >= 0
                                    && sx < w as isize
                                {
                                    self.images.at(i, ci, sy as usize, sx as usize)
                                } else {
                                    0.0
                                };
                                batch.set(bi, ci, hi, wi, v);
                            }
                        }
                    }
                }
            }
        }
        (batch, labels)
    }
}

/// Metrics of one training epoch.
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub top1: f64,
    /// Learning rate at the epoch's final step.
    pub lr: f32,
    /// Flip statistics aggregated over all binary weights this epoch.
    pub flips: FlipSummary,
    /// Per-layer flip statistics for this epoch.
    pub layer_flips: Vec<FlipSummary>,
}

/// Column header of the training-log CSV schema.
pub const TRAIN_CSV_HEADER: &str = "epoch,loss,top1,lr,flips,frac_zero,p50,p90,p95,p99";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let f = &self.flips;
        format!(
            "{},{:.6},{:.4},{:.6},{},{:.6},{},{},{},{}",
            self.epoch, self.loss, self.top1, self.lr, f.flips, f.frac_zero, f.p50, f.p90,
            f.p95, f.p99
        )
    }

    pub fn log_line(&self) -> String {
        format!(
            "epoch {:>3}  loss {:.4}  top1 {:.3}  lr {:.6}  flips {} (p95 {})",
            self.epoch, self.loss, self.top1, self.lr, self.flips.flips, self.flips.p95
        )
    }
}

/// Owns a model and its optimizer/instrumentation state for the duration
/// of a training run. Deterministic: a (graph, config) pair with the same
/// seed yields bit-identical epoch metrics.
pub struct Trainer {
    pub graph: ModelGraph,
    pub cfg: TrainConfig,
    pub optimizer: OptimizerState,
    pub flips: FlipCounter,
    shuffle_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(graph: ModelGraph, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let flips = FlipCounter::new(&graph);
        let optimizer = OptimizerState::new(cfg.optimizer);
        // independent deterministic streams for shuffling and augmentation
        let shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5355_4646_4c45_u64);
        let aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4155_474d_454e_54_u64);
        Ok(Trainer { graph, cfg, optimizer, flips, shuffle_rng, aug_rng, epoch: 0 })
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    /// Runs one epoch over `data`: shuffled mini-batches, STE backward,
    /// scheduled optimizer steps, flip accounting. Returns the epoch's
    /// metrics; per-epoch flip counts reset afterwards.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::invalid_input("train_epoch: empty dataset"));
        }
        let n = data.len();
        let mut order: Vec<usize> = (0..n).collect();
        // Fisher-Yates with the dedicated stream
        for i in (1..n).rev() {
            let j = self.shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let batches: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        let steps = batches.len();
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut lr = 0.0f32;
        for (step, idxs) in batches.into_iter().enumerate() {
            let aug = if self.cfg.augment { Some(&mut self.aug_rng) } else { None };
            let (batch, labels) = data.gather(idxs, aug);
            let frac = (self.epoch as f64 + (step + 1) as f64 / steps as f64)
                / self.cfg.epochs as f64;
            lr = lr_schedule(frac, &self.cfg);

            let cache = self.graph.forward_train(&batch, ExecMode::Binary)?;
            let (loss, grad) = cross_entropy_loss(cache.logits(), &labels)?;
            correct += count_correct(cache.logits(), &labels);
            loss_sum += loss * idxs.len() as f64;
            let grads = self.graph.backward(&cache, &grad, self.cfg.t_clip)?;
            optimizer_step(&mut self.graph.parameters, &grads, &mut self.optimizer, lr)?;
            self.flips.record_step(&self.graph)?;
        }
        let metrics = EpochMetrics {
            epoch: self.epoch,
            loss: loss_sum / n as f64,
            top1: correct as f64 / n as f64,
            lr,
            flips: self.flips.epoch_aggregate(),
            layer_flips: self.flips.epoch_summaries(),
        };
        self.flips.roll_epoch();
        self.epoch += 1;
        Ok(metrics)
    }

    /// Top-1 accuracy over `data` with the exact binary forward.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        evaluate(&self.graph, data, self.cfg.batch_size)
    }
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let (n, k, _, _) = logits.shape();
    let mut correct = 0;
    for ni in 0..n {
        let mut best = 0usize;
        for ki in 1..k {
            if logits.at(ni, ki, 0, 0) > logits.at(ni, best, 0, 0) {
                best = ki;
            }
        }
        if best == labels[ni] {
            correct += 1;
        }
    }
    correct
}

/// Top-1 accuracy of `graph` over `data` (inference mode, binary kernels).
pub fn evaluate(graph: &ModelGraph, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid_input("evaluate: empty dataset"));
    }
    let idxs: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idxs.chunks(batch_size.max(1)) {
        let (batch, labels) = data.gather(chunk, None);
        let logits = graph.forward(&batch, ExecMode::Binary)?;
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / data.len() as f64)
}
