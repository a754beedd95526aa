use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::network::{Gradients, ParamStore};
use super::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd_momentum",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" | "sgd_momentum" | "momentum" => Ok(OptimizerKind::SgdMomentum),
            other => Err(Error::InvalidParameter(format!("unknown optimizer '{other}'"))),
        }
    }
}

fn check_lengths(what: &str, lens: &[usize]) -> Result<()> {
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Shape(format!("{what}: length mismatch {lens:?}")));
    }
    Ok(())
}

/// One bias-corrected Adam update. `t` is the 1-based step number. Weight
/// decay enters as an L2 term added to the gradient.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    weight_decay: f64,
    (beta1, beta2, eps): (f64, f64, f64),
) -> Result<()> {
    check_lengths("adam", &[params.len(), grads.len(), m.len(), v.len()])?;
    if t == 0 {
        return Err(Error::InvalidParameter("adam step numbers start at 1".into()));
    }
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        let p = params[i].as_f64();
        let g = grads[i].as_f64() + weight_decay * p;
        let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * g;
        let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * g * g;
        m[i] = T::from_f64_lossy(mi);
        v[i] = T::from_f64_lossy(vi);
        params[i] = T::from_f64_lossy(p - lr * (mi / c1) / ((vi / c2).sqrt() + eps));
    }
    Ok(())
}

/// `v <- momentum * v + (g + wd * p)`, then `p <- p - lr * v`.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_lengths("sgd", &[params.len(), grads.len(), velocity.len()])?;
    for i in 0..params.len() {
        let p = params[i].as_f64();
        let vi = momentum * velocity[i].as_f64() + grads[i].as_f64() + weight_decay * p;
        velocity[i] = T::from_f64_lossy(vi);
        params[i] = T::from_f64_lossy(p - lr * vi);
    }
    Ok(())
}

/// Optimiser state for every trainable tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub step: u64,
    /// Adam first moments or SGD velocities, index-aligned with the store.
    pub first: Vec<Vec<T>>,
    /// Adam second moments; empty vectors for SGD.
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, store: &ParamStore<T>) -> Self {
        let zeros = |adam_only: bool| -> Vec<Vec<T>> {
            store
                .params
                .iter()
                .map(|p| {
                    if p.trainable && (!adam_only || kind == OptimizerKind::Adam) {
                        vec![T::zero(); p.value.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect()
        };
        Self { kind, step: 0, first: zeros(false), second: zeros(true) }
    }

    pub fn apply(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64, weight_decay: f64) -> Result<()> {
        if grads.grads.len() != store.params.len() || self.first.len() != store.params.len() {
            return Err(Error::Shape("optimizer state does not match parameter store".into()));
        }
        self.step += 1;
        for (i, p) in store.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            match self.kind {
                OptimizerKind::Adam => adam_step(
                    &mut p.value,
                    &grads.grads[i],
                    &mut self.first[i],
                    &mut self.second[i],
                    self.step,
                    lr,
                    weight_decay,
                    (ADAM_BETA1, ADAM_BETA2, ADAM_EPS),
                )?,
                OptimizerKind::SgdMomentum => {
                    sgd_momentum_step(&mut p.value, &grads.grads[i], &mut self.first[i], lr, SGD_MOMENTUM, weight_decay)?
                }
            }
        }
        Ok(())
    }

    /// State arrays named after their parameters, for checkpointing.
    pub fn named_arrays(&self, store: &ParamStore<T>) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        for (i, p) in store.params.iter().enumerate() {
            if !self.first[i].is_empty() {
                let tag = if self.kind == OptimizerKind::Adam { "m" } else { "velocity" };
                out.push((format!("opt.{tag}.{}", p.name), p.shape.clone(), self.first[i].clone()));
            }
            if !self.second[i].is_empty() {
                out.push((format!("opt.v.{}", p.name), p.shape.clone(), self.second[i].clone()));
            }
        }
        out
    }
}
