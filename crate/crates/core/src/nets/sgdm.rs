use serde::{Deserialize, Serialize};

use super::{ConvNet, ParamSet, Real};
use crate::error::{Error, Result};

/// SGD with momentum and L2 regularization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdmConfig {
    pub lr: f64,
    pub l2: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdmConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            l2: 1e-4,
            momentum: 0.9,
            batch_size: 64,
            epochs: 1,
            seed: 0,
        }
    }
}

impl SgdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be ≥ 0, got {}", self.lr)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 must be ≥ 0, got {}", self.l2)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Velocity buffers aligned with a net's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum<T: Real> {
    pub velocity: ParamSet<T>,
}

impl<T: Real> Momentum<T> {
    pub fn zeros_like(net: &ConvNet<T>) -> Self {
        Self {
            velocity: net.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }
}

/// `v ← m·v + (g + λθ)`, then `θ ← θ − η·v`.
pub fn sgdm_step<T: Real>(
    net: &mut ConvNet<T>,
    grads: &ParamSet<T>,
    cfg: &SgdmConfig,
    state: &mut Momentum<T>,
) {
    let (lr, l2, m) = (T::of(cfg.lr), T::of(cfg.l2), T::of(cfg.momentum));
    for ((theta, g), v) in net
        .params_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.velocity.iter_mut())
    {
        for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = m * *vi + (gi + l2 * *t);
            *t = *t - lr * *vi;
        }
    }
}
