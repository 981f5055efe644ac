//! SGD with momentum and coupled weight decay, and the step schedule.

use crate::error::{Error, Result};
use crate::model::NamedTensor;

/// `v ← momentum·v + (grad + wd·param)`, then `param ← param − lr·v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
}

/// `base_lr · factor^(#milestones ≤ epoch)`; epochs count from 0.
pub fn lr_schedule(epoch: usize, base_lr: f64, milestones: &[usize], factor: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * factor.powi(passed as i32)
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates every parameter from its accumulated gradient.
    pub fn step(&mut self, params: &mut [NamedTensor], lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Config(
                "parameter set changed between optimizer steps".into(),
            ));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            sgd_step(
                p.tensor.data_mut(),
                &grad,
                v,
                lr,
                self.momentum,
                self.weight_decay,
            );
        }
        Ok(())
    }
}
