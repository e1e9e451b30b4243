use serde::{Deserialize, Serialize};

use super::config::OptimConfig;
use crate::error::{Error, Result};
use crate::stack::MoteStack;
use crate::tensor::Tensor;

/// Step size at 0-based `step` of `total`: linear warmup from `lr / warmup`
/// up to `lr`, then half-period cosine decay towards zero.
pub fn learning_rate(cfg: &OptimConfig, step: usize, total: usize) -> f64 {
    let warmup = cfg
        .warmup_steps
        .unwrap_or_else(|| (cfg.warmup_fraction * total as f64).round() as usize);
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    let horizon = cfg.decay_steps.unwrap_or(total).max(warmup + 1);
    let progress = ((step - warmup) as f64 / (horizon - warmup) as f64).min(1.0);
    0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adaptive-moment optimizer with decoupled weight decay. Parameters whose
/// gradient is absent in a step (unrouted experts) are left untouched,
/// moments included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Per-parameter update counts, for bias correction.
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(stack: &MoteStack) -> Self {
        let zeros: Vec<Tensor> = stack.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamW {
            t: vec![0; zeros.len()],
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, cfg: &OptimConfig, lr: f64, stack: &mut MoteStack, grads: &[Option<Tensor>]) -> Result<()> {
        let params = stack.params_mut();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            self.t[k] += 1;
            let t = self.t[k] as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let decay = if p.ndim() >= 2 { lr * cfg.weight_decay } else { 0.0 };
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                *w -= decay * *w + lr * update;
            }
        }
        Ok(())
    }
}
