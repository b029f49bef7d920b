//! First-order optimizers and the cosine learning-rate schedule.
//!
//! Update rules follow the usual PyTorch formulations. Each optimizer reads
//! `Tensor::grad` and skips parameters whose gradient is `None`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    /// Defaults used when a protocol leaves hyperparameters open.
    pub fn default_for(kind: OptimizerKind) -> Self {
        let (lr, weight_decay, momentum) = match kind {
            OptimizerKind::Adam => (1e-3, 0.0, 0.0),
            OptimizerKind::AdamW => (1e-3, 0.01, 0.0),
            OptimizerKind::Sgd => (1e-2, 0.0, 0.9),
        };
        OptimizerConfig {
            kind,
            lr,
            betas: default_betas(),
            eps: default_eps(),
            momentum,
            weight_decay,
        }
    }

    pub fn build(&self) -> Optimizer {
        Optimizer::new(self.clone())
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer {
            cfg,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Applies one update with learning rate `lr`. Parameter order must be
    /// stable across calls since state is kept by position.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) {
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let OptimizerConfig {
            kind,
            betas: (b1, b2),
            eps,
            momentum,
            weight_decay: wd,
            ..
        } = self.cfg;

        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad.take() else { continue };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let data = p.data_mut();
            match kind {
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let bc1 = 1.0 - b1.powi(t);
                    let bc2 = 1.0 - b2.powi(t);
                    for j in 0..data.len() {
                        let mut g = grad[j];
                        if kind == OptimizerKind::AdamW {
                            data[j] -= lr * wd * data[j];
                        } else if wd != 0.0 {
                            g += wd * data[j];
                        }
                        m[j] = b1 * m[j] + (1.0 - b1) * g;
                        v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        data[j] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd => {
                    for j in 0..data.len() {
                        let mut g = grad[j];
                        if wd != 0.0 {
                            g += wd * data[j];
                        }
                        let d = if momentum != 0.0 {
                            m[j] = if t == 1 { g } else { momentum * m[j] + g };
                            m[j]
                        } else {
                            g
                        };
                        data[j] -= lr * d;
                    }
                }
            }
            p.grad = Some(grad);
        }
    }
}

/// `0.5 · base · (1 + cos(π · epoch / total))` for `epoch` in `0..total`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * epoch as f64 / total as f64).cos())
}
