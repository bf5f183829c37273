//! Adam with bias correction, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "learning rate must be positive, got {}", self.lr);
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Config,
            "Adam betas must lie in [0, 1), got ({}, {})",
            self.beta1,
            self.beta2
        );
        ensure!(self.eps > 0.0, Config, "Adam eps must be positive");
        Ok(())
    }
}

/// First and second moment estimates plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, grads: &ParamSet<T>, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.m)?;
    params.check_compatible(&state.v)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    let m_iter = state.m.iter_mut();
    let v_iter = state.v.iter_mut();
    for ((((_, p), (_, g)), (_, m)), (_, v)) in params.iter_mut().zip(grads.iter()).zip(m_iter).zip(v_iter) {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = b1 * *mv + one_b1 * gv;
            *vv = b2 * *vv + one_b2 * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamSet<T>, max_norm: f64) -> Result<f64> {
    let norm = grads.global_norm().to_f64_lossy();
    if !norm.is_finite() {
        return Err(Error::Domain(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    Ok(norm)
}
