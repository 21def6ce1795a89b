use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with bias correction and decoupled weight decay. Moments are kept in
/// `f32` so that a saved optimizer resumes bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    /// Number of updates taken.
    pub t: u64,
    /// First and second moments per parameter; empty for fixed tensors.
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamConfig, params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params
            .specs()
            .iter()
            .map(|s| if s.trainable { vec![0.0; s.shape.numel()] } else { Vec::new() })
            .collect();
        AdamW {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with learning rate `lr`; `grads[i] = None` counts as zero.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Option<Vec<f32>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        for i in 0..params.len() {
            if !params.specs()[i].trainable {
                continue;
            }
            let old = params.tensors()[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut next = Vec::with_capacity(old.len());
            for (j, &p) in old.iter().enumerate() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j] as f64);
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * g;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                let p = p as f64;
                next.push((p - lr * c.weight_decay * p - lr * update) as f32);
            }
            params.replace(i, next)?;
        }
        Ok(())
    }
}
