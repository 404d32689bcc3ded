//! Adam with bias correction.

use crate::error::{shape_err, Result};
use crate::graph::ParamGrads;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    /// Zero moments shaped like every tensor in `params`.
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        AdamState {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One update of every parameter. Parameters with no gradient are
    /// treated as having a zero gradient, so their moments still decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if self.first_moment.len() != params.len() {
            return Err(shape_err(
                "adam_step",
                (self.first_moment.len(), 1),
                (params.len(), 1),
            ));
        }
        for id in params.ids() {
            let p = params.get(id);
            if let Some(g) = grads.get(id) {
                if g.shape() != p.shape() {
                    return Err(shape_err("adam_step", p.shape(), g.shape()));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for id in params.ids() {
            let i = id.index();
            let grad = grads.get(id);
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let g = grad.map_or(0.0, |g| g.data()[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
