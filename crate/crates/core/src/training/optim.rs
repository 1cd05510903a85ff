//! First-order optimizers over [`ModelParams`].

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::networks::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Adam first-moment decay, or SGD momentum.
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub nesterov: bool,
}

fn default_weight_decay() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adamw(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            lr,
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            nesterov: false,
        }
    }

    /// Nesterov SGD with momentum 0.99 and weight decay 3e-5.
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay: 3e-5,
            beta1: 0.99,
            beta2: 0.0,
            eps: 0.0,
            nesterov: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (self.kind == OptimizerKind::Sgd || ((0.0..1.0).contains(&self.beta2) && self.eps > 0.0));
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Optimizer state for one parameter set.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &ModelParams) -> Result<Self> {
        cfg.validate()?;
        let zeros = || params.tensors().iter().map(|t| vec![0.0f32; t.len()]).collect();
        Ok(Optimizer {
            cfg,
            step: 0,
            m: zeros(),
            v: match cfg.kind {
                OptimizerKind::AdamW => zeros(),
                OptimizerKind::Sgd => Vec::new(),
            },
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are only decayed.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.step += 1;
        let c = self.cfg;
        let lr = c.lr as f32;
        let wd = c.weight_decay as f32;
        match c.kind {
            OptimizerKind::AdamW => {
                let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
                let bc1 = 1.0 - c.beta1.powi(self.step as i32);
                let bc2 = 1.0 - c.beta2.powi(self.step as i32);
                let step_size = (c.lr / bc1) as f32;
                let bc2_sqrt = bc2.sqrt() as f32;
                let eps = c.eps as f32;
                for i in 0..params.len() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    let p = params.tensor_mut(i).data_mut();
                    match grads.get(i) {
                        Some(g) => {
                            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                                *p -= lr * wd * *p;
                                *m = b1 * *m + (1.0 - b1) * g;
                                *v = b2 * *v + (1.0 - b2) * g * g;
                                *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
                            }
                        }
                        None => p.iter_mut().for_each(|p| *p -= lr * wd * *p),
                    }
                }
            }
            OptimizerKind::Sgd => {
                let mu = c.beta1 as f32;
                for i in 0..params.len() {
                    let Some(g) = grads.get(i) else { continue };
                    let buf = &mut self.m[i];
                    let p = params.tensor_mut(i).data_mut();
                    for ((p, b), &g) in p.iter_mut().zip(buf.iter_mut()).zip(g.data()) {
                        let g = g + wd * *p;
                        *b = mu * *b + g;
                        let d = if c.nesterov { g + mu * *b } else { *b };
                        *p -= lr * d;
                    }
                }
            }
        }
    }
}
