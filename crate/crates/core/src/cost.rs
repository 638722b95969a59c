//! Analytical operation and size accounting.
//!
//! Counting convention: one operation per multiply-accumulate, so a
//! convolution costs kh·kw·(c_in/g)·c_out·h_out·w_out and a fully
//! connected layer c_in·c_out. BatchNorm, pooling, sign, shuffle, concat,
//! and slice-add are free. Binary convolutions land in BOPs, 32-bit
//! layers in FLOPs, and the combined metric is OPs = BOPs/64 + FLOPs.
//!
//! Parameters: convolution weights (1 bit when binary, 32 bits otherwise),
//! 2 float affine values per BatchNorm channel (running statistics are
//! state, not parameters), fully connected weights plus bias.
//! size_bytes = ceil(bits/8) + 4·fp_count; 1 MB = 2²⁰ bytes.

use serde::Serialize;

use crate::error::Result;
use crate::graph::{ArchConfig, LayerKind, LayerSpec, ModelGraph};
use crate::tensor::Shape;

/// Cost of a single layer.
#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub output_shape: (usize, usize, usize, usize),
    pub bops: u64,
    pub flops: u64,
    pub params_binary_bits: u64,
    pub params_fp32: u64,
}

/// Aggregate totals for a model.
#[derive(Debug, Clone, Serialize)]
pub struct CostTotals {
    pub bops: u64,
    pub flops: u64,
    /// BOPs/64 + FLOPs.
    pub ops: f64,
    pub params_binary_bits: u64,
    pub params_fp32: u64,
    pub size_bytes: u64,
    pub size_mib: f64,
}

/// Per-layer and aggregate cost report.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub model: String,
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerCost>,
    pub totals: CostTotals,
}

fn kind_label(kind: &LayerKind) -> &'static str {
    match kind {
        LayerKind::BinaryConv(_) => "binary-conv",
        LayerKind::FpConv(_) => "fp-conv",
        LayerKind::BatchNorm { .. } => "batchnorm",
        LayerKind::Sign => "sign",
        LayerKind::MaxPool { .. } => "maxpool",
        LayerKind::GlobalAvgPool => "avgpool-global",
        LayerKind::ChannelShuffle { .. } => "channel-shuffle",
        LayerKind::Concat => "concat",
        LayerKind::SliceAdd { .. } => "slice-add",
        LayerKind::FullyConnected { .. } => "fully-connected",
    }
}

/// Cost row for one layer given its output shape.
pub fn layer_cost(layer: &LayerSpec, output_shape: Shape) -> LayerCost {
    let (_, _, oh, ow) = output_shape;
    let (bops, flops, bits, fp) = match &layer.kind {
        LayerKind::BinaryConv(p) => {
            let macs = p.weight_count() as u64 * (oh * ow) as u64;
            (macs, 0, p.weight_count() as u64, 0)
        }
        LayerKind::FpConv(p) => {
            let macs = p.weight_count() as u64 * (oh * ow) as u64;
            (0, macs, 0, p.weight_count() as u64)
        }
        LayerKind::BatchNorm { channels } => (0, 0, 0, 2 * *channels as u64),
        LayerKind::FullyConnected { in_features, out_features } => (
            0,
            (*in_features * *out_features) as u64,
            0,
            (*in_features * *out_features + *out_features) as u64,
        ),
        _ => (0, 0, 0, 0),
    };
    LayerCost {
        name: layer.name.clone(),
        kind: kind_label(&layer.kind).to_string(),
        output_shape,
        bops,
        flops,
        params_binary_bits: bits,
        params_fp32: fp,
    }
}

/// Aggregates [`layer_cost`] over a shape-propagation pass (batch size 1).
pub fn model_cost(graph: &ModelGraph) -> Result<CostReport> {
    let shapes = graph.propagate_shapes(1)?;
    let layers: Vec<LayerCost> = graph
        .layers
        .iter()
        .zip(&shapes)
        .map(|(l, &s)| layer_cost(l, s))
        .collect();
    let bops: u64 = layers.iter().map(|l| l.bops).sum();
    let flops: u64 = layers.iter().map(|l| l.flops).sum();
    let bits: u64 = layers.iter().map(|l| l.params_binary_bits).sum();
    let fp: u64 = layers.iter().map(|l| l.params_fp32).sum();
    let size_bytes = bits.div_ceil(8) + 4 * fp;
    let model = graph
        .config
        .as_ref()
        .map(|_| "model".to_string())
        .unwrap_or_else(|| "graph".to_string());
    Ok(CostReport {
        model,
        input_shape: graph.input_shape,
        layers,
        totals: CostTotals {
            bops,
            flops,
            ops: bops as f64 / 64.0 + flops as f64,
            params_binary_bits: bits,
            params_fp32: fp,
            size_bytes,
            size_mib: size_bytes as f64 / (1u64 << 20) as f64,
        },
    })
}

/// Builds and costs each configuration, for side-by-side comparison.
pub fn compare_archs(
    configs: &[(String, ArchConfig)],
) -> Result<Vec<CostReport>> {
    configs
        .iter()
        .map(|(name, cfg)| {
            let graph = ModelGraph::build(cfg)?;
            let mut report = model_cost(&graph)?;
            report.model = name.clone();
            Ok(report)
        })
        .collect()
}

impl CostReport {
    /// Aligned-text rendering; `per_layer` includes the full layer table.
    pub fn to_table(&self, per_layer: bool) -> String {
        let mut out = String::new();
        let t = &self.totals;
        out.push_str(&format!(
            "model {}  input {}x{}x{}\n",
            self.model, self.input_shape.0, self.input_shape.1, self.input_shape.2
        ));
        if per_layer {
            out.push_str(&format!(
                "{:<28} {:<15} {:>18} {:>14} {:>14} {:>12} {:>10}\n",
                "layer", "kind", "output", "BOPs", "FLOPs", "bin bits", "fp32"
            ));
            for l in &self.layers {
                let (n, c, h, w) = l.output_shape;
                out.push_str(&format!(
                    "{:<28} {:<15} {:>18} {:>14} {:>14} {:>12} {:>10}\n",
                    l.name,
                    l.kind,
                    format!("{n}x{c}x{h}x{w}"),
                    l.bops,
                    l.flops,
                    l.params_binary_bits,
                    l.params_fp32
                ));
            }
        }
        out.push_str(&format!(
            "totals: BOPs {:.3}e9  FLOPs {:.3}e8  OPs {:.3}e8  size {:.2} MB ({} bytes)\n",
            t.bops as f64 / 1e9,
            t.flops as f64 / 1e8,
            t.ops / 1e8,
            t.size_mib,
            t.size_bytes
        ));
        out
    }

    /// Machine-readable JSON rendering.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }
}

/// Renders several reports side by side (totals only).
pub fn comparison_table(reports: &[CostReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>12} {:>12} {:>12} {:>10}\n",
        "model", "BOPs(e9)", "FLOPs(e8)", "OPs(e8)", "size(MB)"
    ));
    for r in reports {
        let t = &r.totals;
        out.push_str(&format!(
            "{:<16} {:>12.3} {:>12.3} {:>12.3} {:>10.2}\n",
            r.model,
            t.bops as f64 / 1e9,
            t.flops as f64 / 1e8,
            t.ops / 1e8,
            t.size_mib
        ));
    }
    out
}
