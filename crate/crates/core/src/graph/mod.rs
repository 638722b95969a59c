//! Layer graph: typed layers composed into MeliusNet block structures,
//! transitions, stems, and complete preset models.
//!
//! The graph is a flat list of [`LayerSpec`]s in topological order (every
//! input id precedes its consumer). It is the single source of truth for
//! forward execution, backpropagation, and cost accounting.

mod build;
pub(crate) mod forward;
mod presets;

pub use build::GraphBuilder;
pub use forward::{ExecMode, ForwardCache, Value};
pub use presets::{preset, preset_names};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::conv::out_dim;
use crate::ops::ConvParams;
use crate::tensor::{BitTensor, Shape, Tensor};

/// Sentinel input id referring to the graph's input tensor.
pub const GRAPH_INPUT: usize = usize::MAX;

/// What a layer computes.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// 1-bit convolution (xnor/popcount at inference).
    BinaryConv(ConvParams),
    /// 32-bit convolution.
    FpConv(ConvParams),
    BatchNorm { channels: usize },
    Sign,
    MaxPool {
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    GlobalAvgPool,
    ChannelShuffle { groups: usize },
    /// Concatenates two inputs along the channel axis.
    Concat,
    /// Passes the first input through, adding the second onto its last
    /// `tail` channels.
    SliceAdd { tail: usize },
    FullyConnected { in_features: usize, out_features: usize },
}

/// One node of the layer graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: usize,
    pub name: String,
    pub kind: LayerKind,
    /// Predecessor layer ids ([`GRAPH_INPUT`] for the graph input).
    pub inputs: Vec<usize>,
}

/// Which block pair fills each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockStyle {
    /// Dense Block + Improvement Block (residual over the newest channels).
    Melius,
    /// Dense Block + full-width residual block (costs grow quadratically
    /// in the channel count; kept buildable for cost comparison).
    NaiveResidual,
    /// Dense Blocks only.
    DenseOnly,
}

/// Initial layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StemKind {
    /// Three grouped 3×3 convolutions (32, 32 g4, 64 g8 channels).
    Grouped,
    /// Single 7×7 convolution to 64 channels.
    Conv7x7,
}

/// Everything needed to build one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Block pairs per stage.
    pub block_counts: [usize; 4],
    /// Channels added per Dense Block.
    pub growth: usize,
    /// Transition channel reductions as (out, in) pairs; `in` must equal
    /// the channel count at the end of the preceding stage.
    pub reductions: [(usize, usize); 3],
    /// Groups of the 1×1 downsampling convolutions (a channel shuffle is
    /// inserted before them when > 1).
    pub downsample_groups: usize,
    pub stem: StemKind,
    pub num_classes: usize,
    /// Input shape as (c, h, w).
    pub input_shape: (usize, usize, usize),
    pub block_style: BlockStyle,
}

impl ArchConfig {
    /// Channel count entering each transition (end of stages 1–3) followed
    /// by the classifier input width.
    pub fn stage_end_channels(&self) -> [usize; 4] {
        let mut c = 64;
        let mut out = [0usize; 4];
        for stage in 0..4 {
            c += self.block_counts[stage] * self.growth;
            out[stage] = c;
            if stage < 3 {
                c = self.reductions[stage].0;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.growth == 0 {
            return Err(Error::invalid_config("growth must be positive"));
        }
        if self.downsample_groups == 0 {
            return Err(Error::invalid_config("downsample_groups must be >= 1"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid_config("num_classes must be >= 1"));
        }
        let mut c = 64usize;
        for stage in 0..4 {
            c += self.block_counts[stage] * self.growth;
            if stage < 3 {
                let (c_out, c_in) = self.reductions[stage];
                if c_in != c {
                    return Err(Error::invalid_config(format!(
                        "transition {}: reduction denominator {} does not match \
                         stage channel count {}",
                        stage + 1,
                        c_in,
                        c
                    )));
                }
                if c_out >= c_in {
                    return Err(Error::invalid_config(format!(
                        "transition {}: output channels {} must be below input {}",
                        stage + 1,
                        c_out,
                        c_in
                    )));
                }
                let g = self.downsample_groups;
                if c_in % g != 0 || c_out % g != 0 {
                    return Err(Error::invalid_config(format!(
                        "transition {}: channels {}/{} not divisible by {} groups",
                        stage + 1,
                        c_out,
                        c_in,
                        g
                    )));
                }
                c = c_out;
            }
        }
        Ok(())
    }
}

/// A named parameter tensor: 32-bit dense or 1-bit packed.
#[derive(Debug, Clone, PartialEq)]
pub enum Param {
    Fp(Tensor),
    Bits(BitTensor),
}

impl Param {
    pub fn shape(&self) -> Shape {
        match self {
            Param::Fp(t) => t.shape(),
            Param::Bits(b) => b.shape(),
        }
    }
}

/// Per-layer BatchNorm running statistics (graph state, not trainable
/// parameters — excluded from the cost model and the weight file).
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub epsilon: f32,
    pub momentum: f32,
}

impl BnRunning {
    fn new(channels: usize) -> Self {
        BnRunning {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            epsilon: 1e-5,
            momentum: 0.9,
        }
    }
}

/// A complete model: layers, parameters, and BatchNorm state.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    pub parameters: BTreeMap<String, Param>,
    pub bn_running: BTreeMap<String, BnRunning>,
    /// Input shape as (c, h, w); batch size is free.
    pub input_shape: (usize, usize, usize),
    /// The configuration this graph was built from, when it came from one.
    pub config: Option<ArchConfig>,
}

impl ModelGraph {
    /// Builds a preset or custom architecture with seed 0.
    pub fn build(cfg: &ArchConfig) -> Result<ModelGraph> {
        Self::build_seeded(cfg, 0)
    }

    /// Builds the full model graph for `cfg`, initializing parameters from
    /// the given seed.
    pub fn build_seeded(cfg: &ArchConfig, seed: u64) -> Result<ModelGraph> {
        build::build_model(cfg, seed)
    }

    /// Builds the layer structure only (no parameter tensors); suitable
    /// for shape propagation and cost accounting, not execution.
    pub fn build_skeleton(cfg: &ArchConfig) -> Result<ModelGraph> {
        build::build_model_skeleton(cfg)
    }

    /// Computes each layer's output shape for a batch of `n`, validating
    /// channel arithmetic along every edge. Index i holds layer i's shape.
    pub fn propagate_shapes(&self, n: usize) -> Result<Vec<Shape>> {
        let (c, h, w) = self.input_shape;
        let input_shape = (n, c, h, w);
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut ins = layer.inputs.iter().map(|&id| {
                if id == GRAPH_INPUT {
                    Ok(input_shape)
                } else if id < shapes.len() {
                    Ok(shapes[id])
                } else {
                    Err(Error::contract(format!(
                        "layer {}: input id {} does not precede it",
                        layer.name, id
                    )))
                }
            });
            let first = ins
                .next()
                .ok_or_else(|| Error::contract(format!("layer {}: no inputs", layer.name)))??;
            let rest: Vec<Shape> = ins.collect::<Result<_>>()?;
            let shape = self
                .layer_output_shape(layer, first, &rest)
                .map_err(|e| Error::contract(format!("layer {}: {e}", layer.name)))?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    fn layer_output_shape(&self, layer: &LayerSpec, x: Shape, rest: &[Shape]) -> Result<Shape> {
        let (n, c, h, w) = x;
        match &layer.kind {
            LayerKind::BinaryConv(p) | LayerKind::FpConv(p) => {
                if c != p.in_channels {
                    return Err(Error::contract(format!(
                        "expected {} input channels, got {c}",
                        p.in_channels
                    )));
                }
                let (oh, ow) = p.output_hw(h, w)?;
                Ok((n, p.out_channels, oh, ow))
            }
            LayerKind::BatchNorm { channels } => {
                if c != *channels {
                    return Err(Error::contract(format!(
                        "batchnorm over {channels} channels fed {c}"
                    )));
                }
                Ok(x)
            }
            LayerKind::Sign => Ok(x),
            LayerKind::MaxPool { kernel, stride, padding } => {
                let oh = out_dim(h, kernel.0, stride.0, padding.0)?;
                let ow = out_dim(w, kernel.1, stride.1, padding.1)?;
                Ok((n, c, oh, ow))
            }
            LayerKind::GlobalAvgPool => Ok((n, c, 1, 1)),
            LayerKind::ChannelShuffle { groups } => {
                if c % groups != 0 {
                    return Err(Error::contract(format!(
                        "{c} channels not divisible by {groups} groups"
                    )));
                }
                Ok(x)
            }
            LayerKind::Concat => {
                let (bn, bc, bh, bw) = rest
                    .first()
                    .copied()
                    .ok_or_else(|| Error::contract("concat needs two inputs"))?;
                if bn != n || bh != h || bw != w {
                    return Err(Error::contract(format!(
                        "concat inputs disagree: {x:?} vs {:?}",
                        rest[0]
                    )));
                }
                Ok((n, c + bc, h, w))
            }
            LayerKind::SliceAdd { tail } => {
                let delta = rest
                    .first()
                    .copied()
                    .ok_or_else(|| Error::contract("slice-add needs two inputs"))?;
                if delta != (n, *tail, h, w) {
                    return Err(Error::contract(format!(
                        "slice-add delta shape {delta:?}, expected {:?}",
                        (n, *tail, h, w)
                    )));
                }
                if *tail > c {
                    return Err(Error::contract(format!(
                        "slice-add tail {tail} exceeds {c} channels"
                    )));
                }
                Ok(x)
            }
            LayerKind::FullyConnected { in_features, out_features } => {
                if (c, h, w) != (*in_features, 1, 1) {
                    return Err(Error::contract(format!(
                        "fully-connected expects {}×1×1 input, got {:?}",
                        in_features,
                        (c, h, w)
                    )));
                }
                Ok((n, *out_features, 1, 1))
            }
        }
    }

    /// Checks graph validity: topological input order, consistent channel
    /// arithmetic, and that every referenced parameter exists with the
    /// shape its layer expects.
    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.id != i {
                return Err(Error::contract(format!(
                    "layer {} has id {} at position {i}",
                    layer.name, layer.id
                )));
            }
            for &inp in &layer.inputs {
                if inp != GRAPH_INPUT && inp >= i {
                    return Err(Error::contract(format!(
                        "layer {} consumes id {inp} which does not precede it",
                        layer.name
                    )));
                }
            }
            match &layer.kind {
                LayerKind::BinaryConv(p) | LayerKind::FpConv(p) => {
                    let w = self.param(&format!("{}.weight", layer.name))?;
                    if w.shape() != p.weight_shape() {
                        return Err(Error::contract(format!(
                            "layer {}: weight shape {:?}, expected {:?}",
                            layer.name,
                            w.shape(),
                            p.weight_shape()
                        )));
                    }
                }
                LayerKind::BatchNorm { channels } => {
                    for suffix in ["gamma", "beta"] {
                        let p = self.param(&format!("{}.{suffix}", layer.name))?;
                        if p.shape() != (1, *channels, 1, 1) {
                            return Err(Error::contract(format!(
                                "layer {}: {suffix} shape {:?}, expected {} channels",
                                layer.name,
                                p.shape(),
                                channels
                            )));
                        }
                    }
                    if !self.bn_running.contains_key(&layer.name) {
                        return Err(Error::contract(format!(
                            "layer {}: missing running statistics",
                            layer.name
                        )));
                    }
                }
                LayerKind::FullyConnected { in_features, out_features } => {
                    let w = self.param(&format!("{}.weight", layer.name))?;
                    if w.shape() != (*out_features, *in_features, 1, 1) {
                        return Err(Error::contract(format!(
                            "layer {}: weight shape {:?}",
                            layer.name,
                            w.shape()
                        )));
                    }
                    self.param(&format!("{}.bias", layer.name))?;
                }
                _ => {}
            }
        }
        self.propagate_shapes(1)?;
        Ok(())
    }

    pub(crate) fn param(&self, name: &str) -> Result<&Param> {
        self.parameters
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    /// Names of all binary (1-bit) convolution weight parameters, in layer
    /// order.
    pub fn binary_weight_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::BinaryConv(_)))
            .map(|l| format!("{}.weight", l.name))
            .collect()
    }

    /// Folds BatchNorm running statistics into gamma/beta so inference is
    /// unchanged with identity statistics. Used before export: the weight
    /// file carries trainable parameters only.
    pub fn fold_batchnorm_stats(&mut self) -> Result<()> {
        for layer in &self.layers {
            if let LayerKind::BatchNorm { channels } = layer.kind {
                let running = self
                    .bn_running
                    .get_mut(&layer.name)
                    .ok_or_else(|| Error::contract(format!("missing bn state {}", layer.name)))?;
                let gamma_name = format!("{}.gamma", layer.name);
                let beta_name = format!("{}.beta", layer.name);
                let (mut gamma, mut beta) = match (
                    self.parameters.remove(&gamma_name),
                    self.parameters.remove(&beta_name),
                ) {
                    (Some(Param::Fp(g)), Some(Param::Fp(b))) => (g, b),
                    _ => {
                        return Err(Error::contract(format!(
                            "missing affine parameters for {}",
                            layer.name
                        )))
                    }
                };
                for c in 0..channels {
                    let inv = 1.0 / (running.var[c] as f64 + running.epsilon as f64).sqrt();
                    let g = gamma.data()[c] as f64;
                    let m = running.mean[c] as f64;
                    gamma.data_mut()[c] = (g * inv) as f32;
                    beta.data_mut()[c] = (beta.data()[c] as f64 - g * m * inv) as f32;
                    // identity stats: mean 0 and var such that var+eps = 1
                    running.mean[c] = 0.0;
                    running.var[c] = 1.0 - running.epsilon;
                }
                self.parameters.insert(gamma_name, Param::Fp(gamma));
                self.parameters.insert(beta_name, Param::Fp(beta));
            }
        }
        Ok(())
    }
}
