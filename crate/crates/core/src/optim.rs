//! RMSProp with momentum, the update rule used for all training here:
//!
//! ```text
//! acc <- rho * acc + (1 - rho) * g^2
//! vel <- momentum * vel + lr * g / sqrt(acc + epsilon)
//! theta <- theta - vel
//! ```
//!
//! Epsilon sits inside the square root.

use alloc::format;
use alloc::vec::Vec;

use libm::sqrt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, PARAM_NAMES};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub rho: f64,
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 0.001,
            rho: 0.9,
            momentum: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !self.rho.is_finite() || !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1)", self.rho)));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

/// Per-parameter accumulator and velocity buffers. `hyper` is public so a
/// training loop can decay the learning rate between steps without
/// disturbing the buffers.
pub struct OptimState {
    pub hyper: RmsPropConfig,
    acc: Vec<Tensor>,
    vel: Vec<Tensor>,
}

impl OptimState {
    pub fn new(params: &ModelParams, hyper: RmsPropConfig) -> Result<Self> {
        hyper.validate()?;
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Ok(OptimState {
            hyper,
            acc: zeros.clone(),
            vel: zeros,
        })
    }
}

/// Applies one update in place. Gradients must align with the parameter
/// list one to one; non-finite gradients or resulting parameters are
/// training errors, named by parameter.
pub fn rmsprop_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimState,
) -> Result<()> {
    state.hyper.validate()?;
    let n = params.tensors().len();
    if grads.len() != n {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            n
        )));
    }
    let RmsPropConfig {
        lr,
        rho,
        momentum,
        epsilon,
    } = state.hyper;
    for i in 0..n {
        let name = PARAM_NAMES[i];
        let p = &mut params.tensors_mut()[i];
        if grads[i].shape() != p.shape() {
            return Err(Error::Contract(format!(
                "gradient for {name} has shape {:?}, parameter is {:?}",
                grads[i].shape(),
                p.shape()
            )));
        }
        grads[i].ensure_finite(name).map_err(|e| match e {
            Error::NonFinite(msg) => Error::Training(format!("gradient for {msg}")),
            other => other,
        })?;
        let acc = state.acc[i].data_mut();
        let vel = state.vel[i].data_mut();
        for ((pv, &g), (a, v)) in p
            .data_mut()
            .iter_mut()
            .zip(grads[i].data())
            .zip(acc.iter_mut().zip(vel.iter_mut()))
        {
            *a = rho * *a + (1.0 - rho) * g * g;
            *v = momentum * *v + lr * g / sqrt(*a + epsilon);
            *pv -= *v;
        }
        p.ensure_finite(name).map_err(|e| match e {
            Error::NonFinite(msg) => Error::Training(format!("parameter {msg} diverged")),
            other => other,
        })?;
    }
    Ok(())
}

/// Scales the gradient set so its global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !max_norm.is_finite() || max_norm <= 0.0 {
        return Err(Error::Parameter(format!(
            "clip norm {max_norm} must be positive"
        )));
    }
    let total: f64 = grads.iter().map(|g| g.sq_norm()).sum();
    let norm = sqrt(total);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(scale);
        }
    }
    Ok(norm)
}
