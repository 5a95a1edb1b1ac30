//! First-order optimizers over named parameter sets.

use serde::{Deserialize, Serialize};

use crate::error::{DibsError, Result};
use crate::nets::{ParamGrad, ParamSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Step-wise decay: the rate is divided by `factor` every `every` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrDecay {
    pub factor: f64,
    pub every: usize,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self { factor: 10.0, every: 30 }
    }
}

impl LrDecay {
    /// Learning rate in effect during `epoch` (zero-based).
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        if self.every == 0 {
            return base;
        }
        base / self.factor.powi((epoch / self.every) as i32)
    }
}

fn check_shapes<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, s: &Tensor<T>, name: &str) -> Result<()> {
    if p.shape() != g.shape() || p.shape() != s.shape() {
        return Err(DibsError::shape(format!(
            "{name}: parameter {:?}, gradient {:?}, state {:?}",
            p.shape(),
            g.shape(),
            s.shape()
        )));
    }
    Ok(())
}

/// `v <- momentum * v + g; p <- p - lr * v` on one array.
pub fn sgd_momentum_update<T: Scalar>(
    p: &mut Tensor<T>,
    g: &Tensor<T>,
    v: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_shapes(p, g, v, "sgd")?;
    let (lr, mu) = (T::lit(lr), T::lit(momentum));
    for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Applies [`sgd_momentum_update`] to every parameter passing `keep`.
/// `velocity` mirrors the full parameter set.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut impl ParamSet<T>,
    grads: &ParamGrad<T>,
    velocity: &mut ParamGrad<T>,
    cfg: &SgdConfig,
    lr: f64,
    keep: impl Fn(&str) -> bool,
) -> Result<()> {
    let mut err = None;
    params.visit_params_mut("", &mut |name, p| {
        if err.is_some() || !keep(&name) {
            return;
        }
        err = match (grads.get(&name), velocity.get(&name)) {
            (Some(g), Some(_)) => sgd_momentum_update(p, g, velocity.slot(&name), lr, cfg.momentum).err(),
            _ => Some(DibsError::shape(format!("no gradient or state for {name}"))),
        };
    });
    err.map_or(Ok(()), Err)
}

/// Moment estimates of the adaptive optimizer for a whole parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamGrad<T>,
    pub v: ParamGrad<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_for(set: &impl ParamSet<T>) -> Self {
        Self { m: ParamGrad::zeros_for(set), v: ParamGrad::zeros_for(set), t: 0 }
    }
}

/// One bias-corrected adaptive-moment step on every parameter passing
/// `keep`, descending `grads`.
pub fn adaptive_step<T: Scalar>(
    params: &mut impl ParamSet<T>,
    grads: &ParamGrad<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    keep: impl Fn(&str) -> bool,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 / (1.0 - cfg.beta1.powi(t));
    let c2 = 1.0 / (1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let (c1, c2, lr, eps) = (T::lit(c1), T::lit(c2), T::lit(cfg.lr), T::lit(cfg.eps));
    let AdamState { m, v, .. } = state;
    let mut err = None;
    params.visit_params_mut("", &mut |name, p| {
        if err.is_some() || !keep(&name) {
            return;
        }
        let Some(g) = grads.get(&name) else {
            err = Some(DibsError::shape(format!("no gradient for {name}")));
            return;
        };
        if m.get(&name).is_none() || v.get(&name).is_none() {
            err = Some(DibsError::shape(format!("no optimizer state for {name}")));
            return;
        }
        let (ms, vs) = (m.slot(&name), v.slot(&name));
        if let Err(e) = check_shapes(p, g, ms, &name).and_then(|_| check_shapes(p, g, vs, &name)) {
            err = Some(e);
            return;
        }
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(ms.data_mut()).zip(vs.data_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p -= lr * (*m * c1) / ((*v * c2).sqrt() + eps);
        }
    });
    err.map_or(Ok(()), Err)
}
