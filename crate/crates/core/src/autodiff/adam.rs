use super::params::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of a store, indexed like the store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        AdamState {
            config,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// A gradient for a frozen parameter or a buffer is an error: the caller
    /// tried to optimize something that must stay fixed.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape(format!(
                "adam: {} gradients / {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            let Some(g) = g else { continue };
            let p = store.get(id);
            if p.frozen || p.kind == ParamKind::Buffer {
                return Err(Error::Frozen(p.name.clone()));
            }
            if g.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "adam: gradient {:?} for `{}` {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        self.step += 1;
        for (id, g) in store.ids().zip(grads).collect::<Vec<_>>() {
            let Some(g) = g else { continue };
            let i = id.index();
            adam_update(
                store.value_mut(id).data_mut(),
                g.data(),
                &mut self.m[i],
                &mut self.v[i],
                self.step,
                &self.config,
            );
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of `param` in place. `step` is 1-based.
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}
