//! Adam with bias correction and the constant-then-linear-decay schedule.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers mirroring a parameter list, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { v: m.clone(), m, step: 0 }
    }

    /// One Adam update of `params` in place. Nothing is modified if any
    /// gradient is non-finite or shapes disagree.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        lr: f64,
        params: &mut [&mut Tensor],
        grads: &[(String, &Tensor)],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(crate::error::dim(
                "adam_step",
                alloc::format!("{} params, {} grads, {} moment buffers", params.len(), grads.len(), self.m.len()),
            ));
        }
        for ((p, (name, g)), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(crate::error::dim(
                    "adam_step",
                    alloc::format!("`{}`: param {:?}, grad {:?}", name, p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
        }
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(crate::error::invalid("learning rate", alloc::format!("{}", lr)));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t);
        for (((p, (_, g)), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in it {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (libm::sqrt(vhat) + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Constant learning rate until `decay_start`, then linear decay to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub total: u64,
    pub decay_start: u64,
}

impl LrSchedule {
    pub fn at(&self, iteration: u64) -> f64 {
        if iteration < self.decay_start {
            return self.base;
        }
        if iteration >= self.total {
            return 0.0;
        }
        let span = (self.total - self.decay_start) as f64;
        self.base * (self.total - iteration) as f64 / span
    }
}
