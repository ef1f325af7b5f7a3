//! Stochastic gradient descent with classical momentum and L2 weight decay.
//!
//! Update rule per parameter tensor:
//!   v <- momentum * v + grad + weight_decay * param
//!   param <- param - lr * v

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One in-place update of a single parameter tensor.
pub fn sgd_step(
    param: &mut Tensor,
    velocity: &mut Tensor,
    grad: &Tensor,
    cfg: &SgdConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Dim(format!(
            "sgd shapes: param {:?}, velocity {:?}, grad {:?}",
            param.shape(),
            velocity.shape(),
            grad.shape()
        )));
    }
    let (pd, vd, gd) = (param.data_mut(), velocity.data_mut(), grad.data());
    for i in 0..gd.len() {
        vd[i] = cfg.momentum * vd[i] + gd[i] + cfg.weight_decay * pd[i];
        pd[i] -= cfg.lr * vd[i];
        if !pd[i].is_finite() {
            return Err(Error::NonFinite(format!(
                "parameter entry {} diverged during sgd step",
                i
            )));
        }
    }
    Ok(())
}

/// Momentum state for a fixed family of parameters addressed by index.
///
/// Velocity buffers are created lazily on first use, so one optimizer can
/// serve a model where only a subset of parameters trains.
#[derive(Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: BTreeMap<usize, Tensor>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd {
            cfg,
            velocity: BTreeMap::new(),
        })
    }

    /// Applies one update to every `(param index, gradient)` pair.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[(usize, &Tensor)]) -> Result<()> {
        for (idx, grad) in grads {
            let param = params.get_mut(*idx).ok_or_else(|| {
                Error::Index(format!("sgd param index {} out of range", idx))
            })?;
            let vel = self
                .velocity
                .entry(*idx)
                .or_insert_with(|| Tensor::zeros(param.shape()));
            sgd_step(param, vel, grad, &self.cfg)?;
        }
        Ok(())
    }
}
