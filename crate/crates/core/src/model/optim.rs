use serde::{Deserialize, Serialize};

/// Base learning rate for the bigram model.
pub const DEFAULT_LR: f64 = 0.05;

/// Decoupled-weight-decay Adam hyperparameters. The learning rate is passed
/// per step so schedules stay outside the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linearly decaying learning rate: `lr * (1 - step / total)`.
pub fn linear_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total as f64)
}
