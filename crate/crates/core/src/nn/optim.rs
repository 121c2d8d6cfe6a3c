use serde::{Deserialize, Serialize};

use super::{Gradients, Network};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![50, 75],
            lr_decay: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr_decay must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub config: OptimConfig,
    /// One momentum buffer per parameter slice, in `Network::param_slices` order.
    pub velocity: Vec<Vec<f64>>,
    pub step: u64,
    pub epoch: usize,
}

impl OptimState {
    pub fn new(net: &Network, config: OptimConfig) -> Self {
        let velocity = net
            .param_slices()
            .iter()
            .map(|(_, s)| vec![0.0; s.len()])
            .collect();
        OptimState {
            config,
            velocity,
            step: 0,
            epoch: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        lr_at(&self.config, self.epoch)
    }
}

/// `base_lr · decay^{#milestones ≤ epoch}`.
pub fn lr_at(cfg: &OptimConfig, epoch: usize) -> f64 {
    let passed = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr * cfg.lr_decay.powi(passed as i32)
}

/// Classic momentum SGD with L2 weight decay folded into the gradient:
/// `v ← μv + g + wd·θ`, `θ ← θ − lr·v`. Uses the learning rate of `opt.epoch`.
pub fn sgd_step(net: &mut Network, grads: &Gradients, opt: &mut OptimState) -> Result<()> {
    let grad_slices = grads.param_slices();
    for (name, g) in &grad_slices {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let lr = opt.lr();
    let (mu, wd) = (opt.config.momentum, opt.config.weight_decay);
    let mut params = net.param_slices_mut();
    if params.len() != grad_slices.len() || params.len() != opt.velocity.len() {
        return Err(Error::Dimension("gradient / optimizer state does not match network".into()));
    }
    for (((_, theta), (name, g)), v) in params.iter_mut().zip(&grad_slices).zip(opt.velocity.iter_mut()) {
        if theta.len() != g.len() || theta.len() != v.len() {
            return Err(Error::Dimension(format!("shape mismatch for {name}")));
        }
        for ((t, &gi), vi) in theta.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = mu * *vi + gi + wd * *t;
            *t -= lr * *vi;
        }
    }
    opt.step += 1;
    Ok(())
}

/// Per-coordinate adaptive step (Adam) over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t);
        let b2t = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
