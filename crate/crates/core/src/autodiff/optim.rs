use std::collections::BTreeMap;

use super::params::Parameters;
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Parameters) -> Self {
        let zeros = |_: ()| {
            params
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
                .collect::<BTreeMap<_, _>>()
        };
        Self { config, step: 0, first: zeros(()), second: zeros(()) }
    }

    /// Restores optimizer state saved from an earlier run.
    pub fn from_state(
        config: AdamConfig,
        step: u64,
        first: BTreeMap<String, Tensor>,
        second: BTreeMap<String, Tensor>,
    ) -> Self {
        Self { config, step, first, second }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &BTreeMap<String, Tensor> {
        &self.first
    }

    pub fn second_moments(&self) -> &BTreeMap<String, Tensor> {
        &self.second
    }

    /// One update. `grads` maps parameter names to gradients; parameters
    /// without an entry are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut Parameters, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let m = self.first.get_mut(name).ok_or_else(|| shape_err!("no Adam state for `{}`", name))?;
            let v = self.second.get_mut(name).ok_or_else(|| shape_err!("no Adam state for `{}`", name))?;
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(shape_err!("Adam state for `{}` has shape {:?}, parameter {:?}", name, m.shape(), p.shape()));
            }
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(shape_err!("gradient for `{}` has shape {:?}, parameter {:?}", name, g.shape(), p.shape()));
                }
            }
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
