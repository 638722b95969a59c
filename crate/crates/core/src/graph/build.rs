//! Graph construction: blocks, transitions, stems, and whole models.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{
    ArchConfig, BlockStyle, BnRunning, LayerKind, LayerSpec, ModelGraph, Param, StemKind,
    GRAPH_INPUT,
};
use crate::ops::ConvParams;
use crate::tensor::{Shape, Tensor};

/// Incremental graph assembly with Glorot-initialized parameters.
///
/// Layer append order is the topological order; parameter draws follow
/// layer creation order, so a (config, seed) pair always produces the same
/// graph bit for bit.
pub struct GraphBuilder {
    layers: Vec<LayerSpec>,
    parameters: BTreeMap<String, Param>,
    bn_running: BTreeMap<String, BnRunning>,
    /// None for skeleton builds: layer structure only, no parameter
    /// tensors (enough for shape propagation and cost accounting, ~500
    /// bytes instead of hundreds of megabytes for the big presets).
    rng: Option<ChaCha8Rng>,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        GraphBuilder {
            layers: Vec::new(),
            parameters: BTreeMap::new(),
            bn_running: BTreeMap::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Builder that records layers but allocates no parameters.
    pub fn skeleton() -> Self {
        GraphBuilder {
            layers: Vec::new(),
            parameters: BTreeMap::new(),
            bn_running: BTreeMap::new(),
            rng: None,
        }
    }

    fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: Vec<usize>) -> usize {
        let id = self.layers.len();
        self.layers.push(LayerSpec { id, name: name.into(), kind, inputs });
        id
    }

    /// Glorot-uniform tensor using fan-average over the per-group fans.
    /// None in skeleton mode.
    fn glorot(&mut self, shape: Shape, fan_in: usize, fan_out: usize) -> Option<Tensor> {
        let rng = self.rng.as_mut()?;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        let scale = 2.0 * limit;
        let data = (0..len).map(|_| rng.gen::<f32>() * scale - limit).collect();
        Some(Tensor::from_finite(shape, data))
    }

    fn conv_weight(&mut self, name: &str, p: &ConvParams) -> Result<()> {
        p.validate()?;
        let (kh, kw) = p.kernel;
        let fan_in = kh * kw * p.in_channels / p.groups;
        let fan_out = kh * kw * p.out_channels / p.groups;
        if let Some(w) = self.glorot(p.weight_shape(), fan_in, fan_out) {
            self.parameters.insert(format!("{name}.weight"), Param::Fp(w));
        }
        Ok(())
    }

    /// 32-bit convolution layer.
    pub fn fp_conv(&mut self, name: &str, p: ConvParams, input: usize) -> Result<usize> {
        self.conv_weight(name, &p)?;
        Ok(self.push(name, LayerKind::FpConv(p), vec![input]))
    }

    /// 1-bit convolution layer; the parameter is the 32-bit latent,
    /// binarized on each forward pass.
    pub fn binary_conv(&mut self, name: &str, p: ConvParams, input: usize) -> Result<usize> {
        self.conv_weight(name, &p)?;
        Ok(self.push(name, LayerKind::BinaryConv(p), vec![input]))
    }

    pub fn batchnorm(&mut self, name: &str, channels: usize, input: usize) -> usize {
        if self.rng.is_some() {
            self.parameters.insert(
                format!("{name}.gamma"),
                Param::Fp(Tensor::new((1, channels, 1, 1), vec![1.0; channels]).unwrap()),
            );
            self.parameters.insert(
                format!("{name}.beta"),
                Param::Fp(Tensor::zeros((1, channels, 1, 1))),
            );
            self.bn_running.insert(name.to_string(), BnRunning::new(channels));
        }
        self.push(name, LayerKind::BatchNorm { channels }, vec![input])
    }

    pub fn sign(&mut self, name: &str, input: usize) -> usize {
        self.push(name, LayerKind::Sign, vec![input])
    }

    pub fn maxpool(
        &mut self,
        name: &str,
        kernel: usize,
        stride: usize,
        padding: usize,
        input: usize,
    ) -> usize {
        self.push(
            name,
            LayerKind::MaxPool {
                kernel: (kernel, kernel),
                stride: (stride, stride),
                padding: (padding, padding),
            },
            vec![input],
        )
    }

    pub fn global_avgpool(&mut self, name: &str, input: usize) -> usize {
        self.push(name, LayerKind::GlobalAvgPool, vec![input])
    }

    pub fn fully_connected(&mut self, name: &str, c_in: usize, c_out: usize, input: usize) -> usize {
        if let Some(w) = self.glorot((c_out, c_in, 1, 1), c_in, c_out) {
            self.parameters.insert(format!("{name}.weight"), Param::Fp(w));
            self.parameters.insert(
                format!("{name}.bias"),
                Param::Fp(Tensor::zeros((1, c_out, 1, 1))),
            );
        }
        self.push(
            name,
            LayerKind::FullyConnected { in_features: c_in, out_features: c_out },
            vec![input],
        )
    }

    /// Dense Block: BatchNorm → sign → binary 3×3 conv (c_in → growth) →
    /// concat with the block input. Output has c_in + growth channels, the
    /// first c_in of which are the input, untouched.
    pub fn dense_block(
        &mut self,
        prefix: &str,
        c_in: usize,
        growth: usize,
        input: usize,
    ) -> Result<usize> {
        if c_in == 0 || growth == 0 {
            return Err(Error::invalid_config("dense block: channels must be positive"));
        }
        let bn = self.batchnorm(&format!("{prefix}.bn"), c_in, input);
        let sg = self.sign(&format!("{prefix}.sign"), bn);
        let conv = self.binary_conv(
            &format!("{prefix}.conv"),
            ConvParams::new(c_in, growth, (3, 3)).padding(1),
            sg,
        )?;
        Ok(self.push(format!("{prefix}.concat"), LayerKind::Concat, vec![input, conv]))
    }

    /// Improvement Block: BatchNorm → sign → binary 3×3 conv (c_in →
    /// growth) → residual add onto the last `growth` channels of the block
    /// input. Channel count is unchanged.
    pub fn improvement_block(
        &mut self,
        prefix: &str,
        c_in: usize,
        growth: usize,
        input: usize,
    ) -> Result<usize> {
        if c_in <= growth {
            return Err(Error::invalid_config(format!(
                "improvement block: c_in {c_in} must exceed growth {growth}"
            )));
        }
        let bn = self.batchnorm(&format!("{prefix}.bn"), c_in, input);
        let sg = self.sign(&format!("{prefix}.sign"), bn);
        let conv = self.binary_conv(
            &format!("{prefix}.conv"),
            ConvParams::new(c_in, growth, (3, 3)).padding(1),
            sg,
        )?;
        Ok(self.push(
            format!("{prefix}.add"),
            LayerKind::SliceAdd { tail: growth },
            vec![input, conv],
        ))
    }

    /// Full-width residual block: binary 3×3 conv c_in → c_in added to the
    /// whole feature map. The naive alternative to the Improvement Block;
    /// its cost grows with c_in² rather than c_in·growth.
    pub fn residual_block(&mut self, prefix: &str, c_in: usize, input: usize) -> Result<usize> {
        let bn = self.batchnorm(&format!("{prefix}.bn"), c_in, input);
        let sg = self.sign(&format!("{prefix}.sign"), bn);
        let conv = self.binary_conv(
            &format!("{prefix}.conv"),
            ConvParams::new(c_in, c_in, (3, 3)).padding(1),
            sg,
        )?;
        Ok(self.push(
            format!("{prefix}.add"),
            LayerKind::SliceAdd { tail: c_in },
            vec![input, conv],
        ))
    }

    /// Transition: MaxPool 2×2 stride 2 → channel shuffle (iff groups > 1)
    /// → 32-bit 1×1 grouped conv (c_in → c_out) → BatchNorm. Halves the
    /// spatial dimensions and reduces channels.
    pub fn transition(
        &mut self,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        groups: usize,
        input: usize,
    ) -> Result<usize> {
        if c_out >= c_in {
            return Err(Error::invalid_config(format!(
                "transition: c_out {c_out} must be below c_in {c_in}"
            )));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::invalid_config(format!(
                "transition: channels {c_out}/{c_in} not divisible by {groups} groups"
            )));
        }
        let mut cur = self.maxpool(&format!("{prefix}.pool"), 2, 2, 0, input);
        if groups > 1 {
            cur = self.push(
                format!("{prefix}.shuffle"),
                LayerKind::ChannelShuffle { groups },
                vec![cur],
            );
        }
        cur = self.fp_conv(
            &format!("{prefix}.conv"),
            ConvParams::new(c_in, c_out, (1, 1)).groups(groups),
            cur,
        )?;
        Ok(self.batchnorm(&format!("{prefix}.bn"), c_out, cur))
    }

    /// Grouped stem: 3×3 s2 (c_img → 32), 3×3 g4 (32 → 32), 3×3 g8
    /// (32 → 64), each followed by BatchNorm, then MaxPool 3×3 s2 p1.
    /// Output: 64 channels at quarter resolution.
    pub fn grouped_stem(&mut self, c_img: usize, input: usize) -> Result<usize> {
        let c1 = self.fp_conv(
            "stem.conv1",
            ConvParams::new(c_img, 32, (3, 3)).stride(2).padding(1),
            input,
        )?;
        let b1 = self.batchnorm("stem.bn1", 32, c1);
        let c2 = self.fp_conv(
            "stem.conv2",
            ConvParams::new(32, 32, (3, 3)).padding(1).groups(4),
            b1,
        )?;
        let b2 = self.batchnorm("stem.bn2", 32, c2);
        let c3 = self.fp_conv(
            "stem.conv3",
            ConvParams::new(32, 64, (3, 3)).padding(1).groups(8),
            b2,
        )?;
        let b3 = self.batchnorm("stem.bn3", 64, c3);
        Ok(self.maxpool("stem.pool", 3, 2, 1, b3))
    }

    /// Classic stem: 7×7 s2 p3 conv (c_img → 64), BatchNorm, MaxPool 3×3
    /// s2 p1.
    pub fn stem_7x7(&mut self, c_img: usize, input: usize) -> Result<usize> {
        let c1 = self.fp_conv(
            "stem.conv",
            ConvParams::new(c_img, 64, (7, 7)).stride(2).padding(3),
            input,
        )?;
        let b1 = self.batchnorm("stem.bn", 64, c1);
        Ok(self.maxpool("stem.pool", 3, 2, 1, b1))
    }

    pub fn finish(self, input_shape: (usize, usize, usize), config: Option<ArchConfig>) -> ModelGraph {
        ModelGraph {
            layers: self.layers,
            parameters: self.parameters,
            bn_running: self.bn_running,
            input_shape,
            config,
        }
    }
}

/// Builds the complete model: stem → 4 stages of block pairs with
/// transitions in between → BatchNorm → global average pool → classifier.
pub fn build_model(cfg: &ArchConfig, seed: u64) -> Result<ModelGraph> {
    let graph = assemble(cfg, GraphBuilder::new(seed))?;
    graph.validate()?;
    Ok(graph)
}

/// Structure-only variant for analysis: no parameter tensors are
/// materialized, so even the largest presets build in microseconds. The
/// result supports shape propagation and cost accounting but not forward
/// execution.
pub fn build_model_skeleton(cfg: &ArchConfig) -> Result<ModelGraph> {
    let graph = assemble(cfg, GraphBuilder::skeleton())?;
    graph.propagate_shapes(1)?;
    Ok(graph)
}

fn assemble(cfg: &ArchConfig, mut b: GraphBuilder) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut cur = match cfg.stem {
        StemKind::Grouped => b.grouped_stem(cfg.input_shape.0, GRAPH_INPUT)?,
        StemKind::Conv7x7 => b.stem_7x7(cfg.input_shape.0, GRAPH_INPUT)?,
    };
    let mut c = 64usize;
    for stage in 0..4 {
        for block in 0..cfg.block_counts[stage] {
            let prefix = format!("stage{}.block{}", stage + 1, block + 1);
            cur = b.dense_block(&format!("{prefix}.dense"), c, cfg.growth, cur)?;
            c += cfg.growth;
            match cfg.block_style {
                BlockStyle::Melius => {
                    cur = b.improvement_block(&format!("{prefix}.imp"), c, cfg.growth, cur)?;
                }
                BlockStyle::NaiveResidual => {
                    cur = b.residual_block(&format!("{prefix}.res"), c, cur)?;
                }
                BlockStyle::DenseOnly => {}
            }
        }
        if stage < 3 {
            let (c_out, c_in) = cfg.reductions[stage];
            debug_assert_eq!(c_in, c);
            cur = b.transition(
                &format!("transition{}", stage + 1),
                c_in,
                c_out,
                cfg.downsample_groups,
                cur,
            )?;
            c = c_out;
        }
    }
    cur = b.batchnorm("head.bn", c, cur);
    cur = b.push("head.pool".to_string(), LayerKind::GlobalAvgPool, vec![cur]);
    b.fully_connected("head.fc", c, cfg.num_classes, cur);
    Ok(b.finish(cfg.input_shape, Some(cfg.clone())))
}
