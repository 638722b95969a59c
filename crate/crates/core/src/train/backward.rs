//! Backpropagation over the layer graph.
//!
//! Gradients flow through every layer kind; sign layers apply the
//! straight-through estimator (upstream gradient masked to |input| ≤
//! t_clip), and binary-conv weight gradients are taken with respect to the
//! 32-bit latents behind the binarized weights, masked by the same rule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::forward::{effective_binary_weights, Aux};
use crate::graph::{ForwardCache, LayerKind, ModelGraph, Param, GRAPH_INPUT};
use crate::ops::{
    batchnorm_backward, channel_shuffle_backward, conv2d_backward, fully_connected_backward,
    global_avgpool_backward, maxpool2d_backward,
};
use crate::tensor::{ste_backward, ste_mask, GradTensor, Tensor};

/// Gradient of the loss with respect to every trainable parameter, keyed
/// by parameter name. Binary-conv entries are latent-weight gradients.
pub type GradMap = BTreeMap<String, Tensor>;

impl ModelGraph {
    /// Backpropagates `grad_logits` through the graph using the
    /// activations cached by [`ModelGraph::forward_train`].
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &GradTensor,
        t_clip: f32,
    ) -> Result<GradMap> {
        if cache.values.len() != self.layers.len() {
            return Err(Error::contract(
                "backward: forward cache does not match this graph (missing or stale cache)",
            ));
        }
        let mode = cache.mode();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        let last = self.layers.len() - 1;
        if grad_logits.shape() != cache.values[last].shape() {
            return Err(Error::contract(format!(
                "backward: logit gradient shape {:?} does not match output {:?}",
                grad_logits.shape(),
                cache.values[last].shape()
            )));
        }
        grads[last] = Some(grad_logits.clone());

        let mut param_grads: GradMap = BTreeMap::new();
        for layer in self.layers.iter().rev() {
            let Some(up) = grads[layer.id].take() else {
                continue; // no consumer contributed gradient; nothing flows
            };
            let send = |id: usize, g: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if id == GRAPH_INPUT {
                    return;
                }
                match &mut grads[id] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            };
            match &layer.kind {
                LayerKind::Sign => {
                    let pre = cache.input_value(layer.inputs[0]).to_dense();
                    let gx = ste_backward(&pre, &up, t_clip)?;
                    send(layer.inputs[0], gx, &mut grads);
                }
                LayerKind::BinaryConv(p) => {
                    let x = cache.input_value(layer.inputs[0]).to_dense();
                    let name = format!("{}.weight", layer.name);
                    let param = self.param(&name)?;
                    let w_eff = effective_binary_weights(param, mode).to_dense();
                    let (gx, gw_eff) = conv2d_backward(&x, &w_eff, p, &up)?;
                    if let Param::Fp(latent) = param {
                        // chain through the weight binarization via the STE
                        let mask = ste_mask(latent, t_clip);
                        let mut g_latent = gw_eff;
                        for (g, m) in g_latent.data_mut().iter_mut().zip(mask.data()) {
                            *g *= m;
                        }
                        accumulate(&mut param_grads, name, g_latent);
                    }
                    send(layer.inputs[0], gx, &mut grads);
                }
                LayerKind::FpConv(p) => {
                    let x = cache.input_value(layer.inputs[0]).to_dense();
                    let name = format!("{}.weight", layer.name);
                    let w = match self.param(&name)? {
                        Param::Fp(t) => t,
                        _ => return Err(Error::contract("fp conv has packed weights")),
                    };
                    let (gx, gw) = conv2d_backward(&x, w, p, &up)?;
                    accumulate(&mut param_grads, name, gw);
                    send(layer.inputs[0], gx, &mut grads);
                }
                LayerKind::BatchNorm { channels } => {
                    let state = self.bn_state(&layer.name, *channels)?;
                    let bn_cache = match &cache.aux[layer.id] {
                        Aux::Bn(c) => c,
                        _ => {
                            return Err(Error::contract(format!(
                                "layer {}: no batchnorm cache (forward was not in training mode)",
                                layer.name
                            )))
                        }
                    };
                    let (gx, g_gamma, g_beta) = batchnorm_backward(&up, &state, bn_cache)?;
                    let c = *channels;
                    accumulate(
                        &mut param_grads,
                        format!("{}.gamma", layer.name),
                        Tensor::new((1, c, 1, 1), g_gamma)?,
                    );
                    accumulate(
                        &mut param_grads,
                        format!("{}.beta", layer.name),
                        Tensor::new((1, c, 1, 1), g_beta)?,
                    );
                    send(layer.inputs[0], gx, &mut grads);
                }
                LayerKind::MaxPool { .. } => {
                    let argmax = match &cache.aux[layer.id] {
                        Aux::Argmax(a) => a,
                        _ => return Err(Error::contract("maxpool cache missing")),
                    };
                    let in_shape = cache.input_value(layer.inputs[0]).shape();
                    let gx = maxpool2d_backward(in_shape, argmax, &up)?;
                    send(layer.inputs[0], gx, &mut grads);
                }
                LayerKind::GlobalAvgPool => {
                    let in_shape = cache.input_value(layer.inputs[0]).shape();
                    let gx = global_avgpool_backward(in_shape, &up)?;
                    send(layer.inputs[0], gx, &mut grads);
                }
                LayerKind::ChannelShuffle { groups } => {
                    let gx = channel_shuffle_backward(&up, *groups)?;
                    send(layer.inputs[0], gx, &mut grads);
                }
                LayerKind::Concat => {
                    let a_shape = cache.input_value(layer.inputs[0]).shape();
                    let (n, c, h, w) = up.shape();
                    let ca = a_shape.1;
                    let ga = Tensor::from_fn((n, ca, h, w), |ni, ci, hi, wi| {
                        up.at(ni, ci, hi, wi)
                    });
                    let gb = Tensor::from_fn((n, c - ca, h, w), |ni, ci, hi, wi| {
                        up.at(ni, ca + ci, hi, wi)
                    });
                    send(layer.inputs[0], ga, &mut grads);
                    send(layer.inputs[1], gb, &mut grads);
                }
                LayerKind::SliceAdd { tail } => {
                    let (n, c, h, w) = up.shape();
                    let base = c - *tail;
                    let gd = Tensor::from_fn((n, *tail, h, w), |ni, ti, hi, wi| {
                        up.at(ni, base + ti, hi, wi)
                    });
                    send(layer.inputs[0], up.clone(), &mut grads);
                    send(layer.inputs[1], gd, &mut grads);
                }
                LayerKind::FullyConnected { .. } => {
                    let x = cache.input_value(layer.inputs[0]).to_dense();
                    let w = match self.param(&format!("{}.weight", layer.name))? {
                        Param::Fp(t) => t,
                        _ => return Err(Error::contract("fc has packed weights")),
                    };
                    let (gx, gw, gb) = fully_connected_backward(&x, w, &up)?;
                    accumulate(&mut param_grads, format!("{}.weight", layer.name), gw);
                    let k = gb.len();
                    accumulate(
                        &mut param_grads,
                        format!("{}.bias", layer.name),
                        Tensor::new((1, k, 1, 1), gb)?,
                    );
                    send(layer.inputs[0], gx, &mut grads);
                }
            }
        }
        Ok(param_grads)
    }
}

fn accumulate(map: &mut GradMap, name: impl Into<String>, g: Tensor) {
    let name = name.into();
    match map.get_mut(&name) {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => {
            map.insert(name, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ExecMode, GraphBuilder};
    use crate::ops::ConvParams;
    use crate::tensor::Tensor;

    fn tiny_graph(gamma: f32, beta: f32) -> ModelGraph {
        let mut b = GraphBuilder::new(11);
        let bn = b.batchnorm("bn", 4, GRAPH_INPUT);
        let sg = b.sign("sign", bn);
        let conv = b
            .binary_conv("conv", ConvParams::new(4, 3, (3, 3)).padding(1), sg)
            .unwrap();
        let gap = b.global_avgpool("gap", conv);
        b.fully_connected("fc", 3, 2, gap);
        let mut g = b.finish((4, 4, 4), None);
        if let Some(Param::Fp(t)) = g.parameters.get_mut("bn.gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = gamma);
        }
        if let Some(Param::Fp(t)) = g.parameters.get_mut("bn.beta") {
            t.data_mut().iter_mut().for_each(|v| *v = beta);
        }
        g
    }

    fn input() -> Tensor {
        Tensor::from_fn((2, 4, 4, 4), |n, c, h, w| {
            ((n * 64 + c * 16 + h * 4 + w) as f32 * 0.9173).sin()
        })
    }

    /// t_clip = ∞ is the identity-surrogate backward (the mask never
    /// fires). With every pre-sign activation inside the clip window, the
    /// STE backward must equal it exactly; pushing activations outside the
    /// window must break the equality.
    #[test]
    fn ste_regime_equivalence() {
        let mut g = tiny_graph(0.3, 0.0); // small gamma keeps |pre-sign| < 1.3
        let x = input();
        let cache = g.forward_train(&x, ExecMode::Binary).unwrap();
        let pre_sign = cache.value(0).to_dense();
        let max_abs = pre_sign.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(max_abs < 1.3, "precondition: activations inside window, max {max_abs}");

        let up = Tensor::new((2, 2, 1, 1), vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        let clipped = g.backward(&cache, &up, 1.3).unwrap();
        let identity = g.backward(&cache, &up, f32::MAX).unwrap();
        assert_eq!(clipped, identity);

        // Out-of-window activations make the two differ.
        let mut g = tiny_graph(4.0, 0.0);
        let cache = g.forward_train(&x, ExecMode::Binary).unwrap();
        let clipped = g.backward(&cache, &up, 1.3).unwrap();
        let identity = g.backward(&cache, &up, f32::MAX).unwrap();
        assert_ne!(clipped, identity);
    }

    #[test]
    fn zero_upstream_zeroes_every_gradient() {
        let mut g = tiny_graph(1.0, 0.0);
        let x = input();
        let cache = g.forward_train(&x, ExecMode::Binary).unwrap();
        let up = Tensor::zeros((2, 2, 1, 1));
        let grads = g.backward(&cache, &up, 1.3).unwrap();
        for (name, t) in &grads {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name} has nonzero grad");
        }
        // every trainable parameter received an entry
        assert_eq!(grads.len(), g.parameters.len());
    }

    #[test]
    fn out_of_window_sign_inputs_block_gradient_upstream() {
        // a large beta shift pushes every pre-sign activation outside the
        // window, so nothing flows back past the sign layer: BN affine
        // gradients vanish (their only consumer is the sign path).
        let mut g = tiny_graph(1.0, 100.0);
        let x = input();
        let cache = g.forward_train(&x, ExecMode::Binary).unwrap();
        let pre_sign = cache.value(0).to_dense();
        assert!(pre_sign.data().iter().all(|v| v.abs() > 1.3));
        let up = Tensor::new((2, 2, 1, 1), vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let grads = g.backward(&cache, &up, 1.3).unwrap();
        assert!(grads["bn.gamma"].data().iter().all(|&v| v == 0.0));
        assert!(grads["bn.beta"].data().iter().all(|&v| v == 0.0));
        // the classifier still learns
        assert!(grads["fc.weight"].data().iter().any(|&v| v != 0.0));
    }
}
