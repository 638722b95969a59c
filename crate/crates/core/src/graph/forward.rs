//! Graph execution.
//!
//! Two modes share one code path:
//!
//! * [`ExecMode::Binary`] — sign layers emit packed bits, binary
//!   convolutions run xnor/popcount on binarized latent weights. This is
//!   the deployed forward; training uses it with the STE backward.
//! * [`ExecMode::Clamp`] — sign layers emit `clamp(x, ±t_clip)` and binary
//!   convolutions run on clamped latent weights in 32-bit arithmetic. The
//!   STE mask is the exact derivative of this forward, which makes it the
//!   surrogate that finite-difference checks can validate end to end.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerSpec, ModelGraph, Param, GRAPH_INPUT};
use crate::ops::{
    batchnorm_forward, batchnorm_forward_train, channel_shuffle, conv2d_reference, conv2d_xnor,
    fully_connected, global_avgpool, maxpool2d_with_argmax, BatchNormState, BnCache,
};
use crate::tensor::{sign_forward, unpack_bits, BitTensor, Tensor};

/// How sign layers and binary convolutions execute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExecMode {
    /// Exact 1-bit forward (packed activations, xnor/popcount kernels).
    Binary,
    /// Real-valued surrogate whose derivative is the STE backward.
    Clamp { t_clip: f32 },
}

/// A layer output: dense floats or packed bits.
#[derive(Debug, Clone)]
pub enum Value {
    Dense(Tensor),
    Bits(BitTensor),
}

impl Value {
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        match self {
            Value::Dense(t) => t.shape(),
            Value::Bits(b) => b.shape(),
        }
    }

    /// Dense view: unpacks bits to ±1 values when needed.
    pub fn to_dense(&self) -> Tensor {
        match self {
            Value::Dense(t) => t.clone(),
            Value::Bits(b) => unpack_bits(b),
        }
    }

    fn expect_dense(&self, what: &str) -> Result<&Tensor> {
        match self {
            Value::Dense(t) => Ok(t),
            Value::Bits(_) => Err(Error::contract(format!(
                "{what}: expected dense input, got packed bits"
            ))),
        }
    }
}

/// Per-layer intermediates kept by the training forward.
#[derive(Debug, Clone)]
pub(crate) enum Aux {
    None,
    Bn(BnCache),
    Argmax(Vec<usize>),
}

/// Activations and auxiliary state recorded by a training-mode forward,
/// consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) input: Tensor,
    pub(crate) values: Vec<Value>,
    pub(crate) aux: Vec<Aux>,
    pub(crate) mode: ExecMode,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        match self.values.last() {
            Some(Value::Dense(t)) => t,
            _ => unreachable!("graph output is always dense"),
        }
    }

    /// Cached output of layer `id`.
    pub fn value(&self, id: usize) -> &Value {
        &self.values[id]
    }

    pub(crate) fn input_value(&self, id: usize) -> Value {
        if id == GRAPH_INPUT {
            Value::Dense(self.input.clone())
        } else {
            self.values[id].clone()
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }
}

fn clamp_tensor(x: &Tensor, t_clip: f32) -> Tensor {
    let data = x.data().iter().map(|&v| v.clamp(-t_clip, t_clip)).collect();
    Tensor::new(x.shape(), data).expect("clamp preserves finiteness")
}

/// Binary-conv weights as used by the given mode: sign-binarized (packed)
/// for Binary, clamped dense for Clamp. Packed parameters pass through in
/// Binary mode and unpack to ±1 in Clamp mode.
pub(crate) fn effective_binary_weights(param: &Param, mode: ExecMode) -> Value {
    match (param, mode) {
        (Param::Fp(latent), ExecMode::Binary) => Value::Bits(sign_forward(latent)),
        (Param::Fp(latent), ExecMode::Clamp { t_clip }) => {
            Value::Dense(clamp_tensor(latent, t_clip))
        }
        (Param::Bits(bits), ExecMode::Binary) => Value::Bits(bits.clone()),
        (Param::Bits(bits), ExecMode::Clamp { .. }) => Value::Dense(unpack_bits(bits)),
    }
}

impl ModelGraph {
    /// Inference forward pass: BatchNorm uses running statistics, nothing
    /// is mutated or cached. Returns the logits (n × num_classes × 1 × 1).
    pub fn forward(&self, x: &Tensor, mode: ExecMode) -> Result<Tensor> {
        let values = self.execute(x, mode, false, &mut |_, _| {})?;
        match values.into_iter().next_back() {
            Some(Value::Dense(t)) => Ok(t),
            _ => Err(Error::contract("graph produced no output")),
        }
    }

    /// Training forward pass: BatchNorm normalizes by batch statistics and
    /// updates running estimates; every layer output is cached for the
    /// backward pass.
    pub fn forward_train(&mut self, x: &Tensor, mode: ExecMode) -> Result<ForwardCache> {
        let mut aux: Vec<Aux> = Vec::with_capacity(self.layers.len());
        // Two-phase borrow dance: batchnorm updates need &mut self.bn_running
        // while execution reads parameters, so collect updates and apply.
        let mut bn_updates: Vec<(String, BatchNormState)> = Vec::new();
        let values = {
            let record = &mut |_id: usize, a: Aux| aux.push(a);
            self.execute_impl(x, mode, true, record, &mut bn_updates)?
        };
        for (name, state) in bn_updates {
            let running = self.bn_running.get_mut(&name).expect("bn state exists");
            running.mean = state.running_mean;
            running.var = state.running_var;
        }
        Ok(ForwardCache { input: x.clone(), values, aux, mode })
    }

    fn execute(
        &self,
        x: &Tensor,
        mode: ExecMode,
        training: bool,
        record: &mut dyn FnMut(usize, Aux),
    ) -> Result<Vec<Value>> {
        let mut unused = Vec::new();
        let mut shim = |id: usize, a: Aux| record(id, a);
        self.execute_impl(x, mode, training, &mut shim, &mut unused)
    }

    fn execute_impl(
        &self,
        x: &Tensor,
        mode: ExecMode,
        training: bool,
        record: &mut dyn FnMut(usize, Aux),
        bn_updates: &mut Vec<(String, BatchNormState)>,
    ) -> Result<Vec<Value>> {
        let (c, h, w) = self.input_shape;
        if (x.shape().1, x.shape().2, x.shape().3) != (c, h, w) {
            return Err(Error::contract(format!(
                "graph input: expected (_, {c}, {h}, {w}), got {:?}",
                x.shape()
            )));
        }
        let mut values: Vec<Value> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let get = |id: usize| -> Result<Value> {
                if id == GRAPH_INPUT {
                    Ok(Value::Dense(x.clone()))
                } else {
                    Ok(values[id].clone())
                }
            };
            let named = |e: Error| Error::contract(format!("layer {}: {e}", layer.name));
            let (out, aux) = self
                .run_layer(layer, &get, mode, training, bn_updates)
                .map_err(named)?;
            record(layer.id, aux);
            values.push(out);
        }
        Ok(values)
    }

    fn run_layer(
        &self,
        layer: &LayerSpec,
        get: &dyn Fn(usize) -> Result<Value>,
        mode: ExecMode,
        training: bool,
        bn_updates: &mut Vec<(String, BatchNormState)>,
    ) -> Result<(Value, Aux)> {
        let x = get(layer.inputs[0])?;
        match &layer.kind {
            LayerKind::Sign => {
                let xt = x.expect_dense("sign")?;
                let out = match mode {
                    ExecMode::Binary => Value::Bits(sign_forward(xt)),
                    ExecMode::Clamp { t_clip } => Value::Dense(clamp_tensor(xt, t_clip)),
                };
                Ok((out, Aux::None))
            }
            LayerKind::BinaryConv(p) => {
                let weights = effective_binary_weights(
                    self.param(&format!("{}.weight", layer.name))?,
                    mode,
                );
                let out = match (&x, &weights) {
                    (Value::Bits(xb), Value::Bits(wb)) => conv2d_xnor(xb, wb, p)?,
                    (Value::Dense(xt), Value::Dense(wt)) => conv2d_reference(xt, wt, p)?,
                    _ => {
                        return Err(Error::contract(
                            "binary conv input domain does not match execution mode",
                        ))
                    }
                };
                Ok((Value::Dense(out), Aux::None))
            }
            LayerKind::FpConv(p) => {
                let xt = x.expect_dense("fp conv")?;
                let w = match self.param(&format!("{}.weight", layer.name))? {
                    Param::Fp(t) => t,
                    Param::Bits(_) => {
                        return Err(Error::contract("fp conv has packed weights"))
                    }
                };
                Ok((Value::Dense(conv2d_reference(xt, w, p)?), Aux::None))
            }
            LayerKind::BatchNorm { channels } => {
                let xt = x.expect_dense("batchnorm")?;
                let mut state = self.bn_state(&layer.name, *channels)?;
                if training {
                    let (out, cache) = batchnorm_forward_train(xt, &mut state)?;
                    bn_updates.push((layer.name.clone(), state));
                    Ok((Value::Dense(out), Aux::Bn(cache)))
                } else {
                    Ok((Value::Dense(batchnorm_forward(xt, &state)?), Aux::None))
                }
            }
            LayerKind::MaxPool { kernel, stride, padding } => {
                let xt = x.expect_dense("maxpool")?;
                let (out, argmax) = maxpool2d_with_argmax(xt, *kernel, *stride, *padding)?;
                Ok((Value::Dense(out), Aux::Argmax(argmax)))
            }
            LayerKind::GlobalAvgPool => {
                let xt = x.expect_dense("global avgpool")?;
                Ok((Value::Dense(global_avgpool(xt)), Aux::None))
            }
            LayerKind::ChannelShuffle { groups } => {
                let xt = x.expect_dense("channel shuffle")?;
                Ok((Value::Dense(channel_shuffle(xt, *groups)?), Aux::None))
            }
            LayerKind::Concat => {
                let a = x.expect_dense("concat")?.clone();
                let b = get(layer.inputs[1])?.to_dense();
                let (n, ca, h, w) = a.shape();
                let (nb, cb, hb, wb) = b.shape();
                if (n, h, w) != (nb, hb, wb) {
                    return Err(Error::contract(format!(
                        "concat inputs disagree: {:?} vs {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                let mut out = Tensor::zeros((n, ca + cb, h, w));
                for ni in 0..n {
                    for ci in 0..ca + cb {
                        for hi in 0..h {
                            for wi in 0..w {
                                let v = if ci < ca {
                                    a.at(ni, ci, hi, wi)
                                } else {
                                    b.at(ni, ci - ca, hi, wi)
                                };
                                out.set(ni, ci, hi, wi, v);
                            }
                        }
                    }
                }
                Ok((Value::Dense(out), Aux::None))
            }
            LayerKind::SliceAdd { tail } => {
                let main = x.expect_dense("slice-add")?.clone();
                let delta = get(layer.inputs[1])?.to_dense();
                let (n, c, h, w) = main.shape();
                if delta.shape() != (n, *tail, h, w) || *tail > c {
                    return Err(Error::contract(format!(
                        "slice-add: delta {:?} incompatible with main {:?} (tail {tail})",
                        delta.shape(),
                        main.shape()
                    )));
                }
                let mut out = main;
                let base = c - *tail;
                for ni in 0..n {
                    for ti in 0..*tail {
                        for hi in 0..h {
                            for wi in 0..w {
                                let v = out.at(ni, base + ti, hi, wi) + delta.at(ni, ti, hi, wi);
                                out.set(ni, base + ti, hi, wi, v);
                            }
                        }
                    }
                }
                Ok((Value::Dense(out), Aux::None))
            }
            LayerKind::FullyConnected { .. } => {
                let xt = x.expect_dense("fully-connected")?;
                let w = match self.param(&format!("{}.weight", layer.name))? {
                    Param::Fp(t) => t,
                    _ => return Err(Error::contract("fully-connected has packed weights")),
                };
                let bias = match self.param(&format!("{}.bias", layer.name))? {
                    Param::Fp(t) => t.data().to_vec(),
                    _ => return Err(Error::contract("fully-connected bias is packed")),
                };
                Ok((Value::Dense(fully_connected(xt, w, &bias)?), Aux::None))
            }
        }
    }

    /// Assembles the ops-level BatchNorm state for a layer from the
    /// parameter map and running statistics.
    pub(crate) fn bn_state(&self, name: &str, channels: usize) -> Result<BatchNormState> {
        let gamma = match self.param(&format!("{name}.gamma"))? {
            Param::Fp(t) => t.data().to_vec(),
            _ => return Err(Error::contract("batchnorm gamma is packed")),
        };
        let beta = match self.param(&format!("{name}.beta"))? {
            Param::Fp(t) => t.data().to_vec(),
            _ => return Err(Error::contract("batchnorm beta is packed")),
        };
        let running = self
            .bn_running
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing running stats for {name}")))?;
        if gamma.len() != channels || running.mean.len() != channels {
            return Err(Error::contract(format!(
                "batchnorm {name}: parameter lengths disagree with {channels} channels"
            )));
        }
        Ok(BatchNormState {
            gamma,
            beta,
            running_mean: running.mean.clone(),
            running_var: running.var.clone(),
            epsilon: running.epsilon,
            momentum: running.momentum,
        })
    }

    /// Convenience map of parameter names to shapes (used by import checks).
    pub fn parameter_shapes(&self) -> BTreeMap<String, (usize, usize, usize, usize)> {
        self.parameters
            .iter()
            .map(|(k, v)| (k.clone(), v.shape()))
            .collect()
    }
}
