//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Clip the global gradient norm of each update to this value.
    pub clip_norm: Option<f32>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    step: u32,
}

/// Per-tensor moment estimates keyed by tensor name. Each tensor keeps its
/// own step counter, so tensors updated on alternating batches get the bias
/// correction that matches the number of updates they actually received.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

/// L2 norm of the concatenated gradients (missing gradients count as zero).
pub fn global_grad_norm<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    params
        .into_iter()
        .filter_map(|t| t.grad())
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self, name: &str) -> u32 {
        self.state.get(name).map_or(0, |m| m.step)
    }

    /// Apply one update to every tensor in `params` using its stored gradient,
    /// with learning rate `lr`. Tensors without a gradient are left alone.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], lr: f32) -> f64 {
        self.step_each(params, |_| lr)
    }

    /// As [`AdamW::step`], with a learning rate chosen per tensor name. The
    /// clip factor is shared across all of `params`.
    pub fn step_each(&mut self, params: &mut [(&str, &mut Tensor)], lr_of: impl Fn(&str) -> f32) -> f64 {
        let norm = global_grad_norm(params.iter().map(|(_, t)| &**t));
        let clip = match self.config.clip_norm {
            Some(c) if norm > c as f64 => (c as f64 / norm) as f32,
            _ => 1.0,
        };
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = tensor.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let st = self.state.entry((*name).to_string()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                step: 0,
            });
            st.step += 1;
            let lr = lr_of(name);
            let bc1 = 1.0 - beta1.powi(st.step as i32);
            let bc2 = 1.0 - beta2.powi(st.step as i32);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i] * clip;
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * data[i]);
            }
        }
        norm
    }
}
