//! Optimizers and the warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::Param;
use crate::train::backward::GradMap;
use crate::train::TrainConfig;

/// Which update rule drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

/// Per-parameter accumulator state plus hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// SGD momentum coefficient.
    pub momentum: f32,
    /// First moments (Adam) or velocities (SGD), keyed by parameter name.
    first: BTreeMap<String, Vec<f32>>,
    /// Second moments; unused by SGD.
    second: BTreeMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum: 0.9,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Second-moment accumulators are non-negative by construction; exposed
    /// for invariant checks.
    pub fn second_moments_nonnegative(&self) -> bool {
        self.second.values().all(|v| v.iter().all(|&x| x >= 0.0))
    }
}

/// One bias-corrected Adam update over every gradient entry. Latent 32-bit
/// weights behind binary convolutions update like any other parameter;
/// binarization happens on the next forward.
pub fn adam_step(
    params: &mut BTreeMap<String, Param>,
    grads: &GradMap,
    state: &mut OptimizerState,
    lr: f32,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, grad) in grads {
        let tensor = match params.get_mut(name) {
            Some(Param::Fp(t)) => t,
            Some(Param::Bits(_)) => continue, // frozen packed weights
            None => {
                return Err(Error::contract(format!(
                    "adam_step: gradient for unknown parameter {name}"
                )))
            }
        };
        if tensor.len() != grad.len() {
            return Err(Error::contract(format!(
                "adam_step: {name} has {} values but gradient has {}",
                tensor.len(),
                grad.len()
            )));
        }
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for ((p, &g), (mi, vi)) in tensor
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * g;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// One SGD-with-momentum update: v ← μv + g, p ← p − lr·v.
pub fn sgd_step(
    params: &mut BTreeMap<String, Param>,
    grads: &GradMap,
    state: &mut OptimizerState,
    lr: f32,
) -> Result<()> {
    state.step += 1;
    for (name, grad) in grads {
        let tensor = match params.get_mut(name) {
            Some(Param::Fp(t)) => t,
            Some(Param::Bits(_)) => continue,
            None => {
                return Err(Error::contract(format!(
                    "sgd_step: gradient for unknown parameter {name}"
                )))
            }
        };
        let v = state
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for ((p, &g), vi) in tensor.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
            *vi = state.momentum * *vi + g;
            *p -= lr * *vi;
        }
    }
    Ok(())
}

/// Dispatches to the configured update rule.
pub fn optimizer_step(
    params: &mut BTreeMap<String, Param>,
    grads: &GradMap,
    state: &mut OptimizerState,
    lr: f32,
) -> Result<()> {
    match state.kind {
        OptimizerKind::Adam => adam_step(params, grads, state, lr),
        OptimizerKind::SgdMomentum => sgd_step(params, grads, state, lr),
    }
}

/// Learning rate at training fraction `t` ∈ [0, 1]: linear ramp from 0 to
/// `base_lr` across the warmup fraction, then cosine decay
/// lr(t) = base·(1 + cos(π·t'))/2 over the remaining fraction.
pub fn lr_schedule(t: f64, cfg: &TrainConfig) -> f32 {
    let t = t.clamp(0.0, 1.0);
    let warm = cfg.warmup_epochs as f64 / cfg.epochs.max(1) as f64;
    let lr = if warm > 0.0 && t < warm {
        cfg.base_lr as f64 * (t / warm)
    } else {
        let t_cos = if warm >= 1.0 { 0.0 } else { (t - warm) / (1.0 - warm) };
        cfg.base_lr as f64 * (1.0 + (std::f64::consts::PI * t_cos).cos()) / 2.0
    };
    lr as f32
}
