//! Adam with bias correction and decoupled weight decay.

use crate::error::{NnError, Result};
use crate::params::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    /// `beta1 = 0.2` and `weight_decay = 5e-4` are the method's published settings.
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.2,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(NnError::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// One in-place Adam update of a flat parameter; `step` is the 1-based step count.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * param[i]);
    }
}

/// Moment accumulators for every entry of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .entries()
            .iter()
            .map(|e| vec![0.0; e.value.numel()])
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: AdamState::new(store),
        })
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if self.state.first.len() != store.len() {
            return Err(NnError::Dimension("Adam state does not match store".into()));
        }
        self.state.step += 1;
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let param = store.get_mut(id).data_mut();
            if g.len() != param.len() {
                return Err(NnError::Dimension(format!(
                    "gradient of length {} for parameter of length {}",
                    g.len(),
                    param.len()
                )));
            }
            adam_step(
                param,
                g,
                &mut self.state.first[id.0],
                &mut self.state.second[id.0],
                self.state.step,
                &self.config,
            );
        }
        Ok(())
    }
}
