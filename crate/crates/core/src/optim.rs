//! Adaptive-moment (Adam) parameter updates.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` in place. Weight decay is the L2 form added to
    /// the gradient.
    pub fn update(&mut self, params: &mut [f32], grads: &[f32]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = f64::from(grads[i]) + self.weight_decay * f64::from(params[i]);
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] = (f64::from(params[i]) - self.lr * mh / (vh.sqrt() + self.eps)) as f32;
        }
        Ok(())
    }
}
