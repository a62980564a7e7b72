//! Adam optimizer with bias-corrected first and second moments.
//!
//! Per element: `m = b1*m + (1-b1)*g`, `v = b2*v + (1-b2)*g^2`, then
//! `p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)` where `t`
//! counts completed steps starting at 1. Moment buffers are zero-initialized
//! and share the parameter's shape.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Slot<E: Scalar> {
    m: Tensor<E>,
    v: Tensor<E>,
}

pub struct Adam<E: Scalar> {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<Option<Slot<E>>>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, slots: Vec::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Completed update steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from per-parameter gradients. Gradients must belong
    /// to trainable entries and match their shapes.
    pub fn step(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &[(ParamId, Tensor<E>)],
    ) -> Result<()> {
        if self.slots.len() < store.len() {
            self.slots.resize_with(store.len(), || None);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = E::from_f64(1.0 / (1.0 - self.cfg.beta1.powi(t)));
        let c2 = E::from_f64(1.0 / (1.0 - self.cfg.beta2.powi(t)));
        let lr = E::from_f64(self.cfg.lr);
        let eps = E::from_f64(self.cfg.eps);
        let b1 = E::from_f64(self.cfg.beta1);
        let nb1 = E::from_f64(1.0 - self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let nb2 = E::from_f64(1.0 - self.cfg.beta2);

        for (id, g) in grads {
            let entry = store.entry(*id);
            if !entry.trainable {
                return Err(Error::invalid(
                    "adam",
                    format!("gradient supplied for non-trainable entry {:?}", entry.name),
                ));
            }
            if entry.value.shape() != g.shape() {
                return Err(Error::shape(
                    "adam",
                    format!(
                        "gradient shape {} does not match parameter {:?} of shape {}",
                        g.shape(),
                        entry.name,
                        entry.value.shape()
                    ),
                ));
            }
            let slot = self.slots[id.index()].get_or_insert_with(|| Slot {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let value = store.value_mut(*id);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let m = &mut slot.m.data_mut()[i];
                *m = b1 * *m + nb1 * gi;
                let v = &mut slot.v.data_mut()[i];
                *v = b2 * *v + nb2 * gi * gi;
                let m_hat = *m * c1;
                let v_hat = *v * c2;
                value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers for a parameter, if it ever received a gradient.
    pub fn state(&self, id: ParamId) -> Option<(&Tensor<E>, &Tensor<E>)> {
        self.slots
            .get(id.index())
            .and_then(|s| s.as_ref())
            .map(|s| (&s.m, &s.v))
    }

    /// Restore moment buffers (checkpoint loading).
    pub fn set_state(&mut self, id: ParamId, m: Tensor<E>, v: Tensor<E>) -> Result<()> {
        if m.shape() != v.shape() {
            return Err(Error::shape("adam", format!("m {} vs v {}", m.shape(), v.shape())));
        }
        if self.slots.len() <= id.index() {
            self.slots.resize_with(id.index() + 1, || None);
        }
        self.slots[id.index()] = Some(Slot { m, v });
        Ok(())
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }
}
