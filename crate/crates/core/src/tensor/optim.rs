use serde::{Deserialize, Serialize};

use super::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub amsgrad: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-8,
            amsgrad: true,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub v_max: Vec<f32>,
}

impl ParamState {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            v_max: vec![0.0; n],
        }
    }
}

/// AdamW with decoupled weight decay and optional AMSGrad.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub states: Vec<ParamState>,
    pub step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            states: sizes.iter().map(|&n| ParamState::zeros(n)).collect(),
            step: 0,
        }
    }

    /// One update of every parameter tensor. A non-finite gradient rejects
    /// the whole step and leaves params and state untouched.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], lr: f64) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(TensorError::Contract(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.states.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), s) in params.iter().zip(grads).zip(&self.states) {
            if p.len() != s.m.len() || g.len() != s.m.len() {
                return Err(TensorError::Shape {
                    op: "adamw_step",
                    lhs: vec![s.m.len()],
                    rhs: vec![p.len(), g.len()],
                });
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(TensorError::NonFinite { op: "adamw_step" });
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - lr * c.weight_decay;
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let m = c.beta1 * s.m[i] as f64 + (1.0 - c.beta1) * gi;
                let v = c.beta2 * s.v[i] as f64 + (1.0 - c.beta2) * gi * gi;
                s.m[i] = m as f32;
                s.v[i] = v as f32;
                let second = if c.amsgrad {
                    s.v_max[i] = s.v_max[i].max(s.v[i]);
                    s.v_max[i] as f64
                } else {
                    v
                };
                let denom = second.sqrt() / bc2.sqrt() + c.eps;
                let w = p[i] as f64 * decay;
                p[i] = (w - lr * (m / bc1) / denom) as f32;
            }
        }
        Ok(())
    }
}
