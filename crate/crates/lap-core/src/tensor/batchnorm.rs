//! Batch normalization state.
//!
//! Train mode normalizes with the biased (1/m) batch variance and folds the
//! unbiased (1/(m-1)) estimate into the running average; eval mode applies
//! the running statistics and is deterministic. This matches the common
//! convention.

use serde::{Deserialize, Serialize};

use super::TensorError;

/// Forward mode for stateful layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel scale/shift plus running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    /// Scale γ, one entry per channel.
    pub gamma: Vec<f64>,
    /// Shift β, one entry per channel.
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// EMA weight for new batch statistics, in (0,1).
    pub momentum: f64,
    pub epsilon: f64,
}

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

impl BatchNormState {
    /// Fresh state: γ=1, β=0, running mean 0, running variance 1.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: DEFAULT_BN_MOMENTUM,
            epsilon: DEFAULT_BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let c = self.gamma.len();
        if self.shift.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(TensorError::Invalid {
                op: "batchnorm",
                msg: format!(
                    "state vectors disagree on channel count: gamma {}, shift {}, mean {}, var {}",
                    c,
                    self.shift.len(),
                    self.running_mean.len(),
                    self.running_var.len()
                ),
            });
        }
        if !(0.0 < self.momentum && self.momentum < 1.0) {
            return Err(TensorError::Invalid {
                op: "batchnorm",
                msg: format!("momentum {} outside (0,1)", self.momentum),
            });
        }
        if self.epsilon <= 0.0 {
            return Err(TensorError::Invalid {
                op: "batchnorm",
                msg: format!("epsilon {} must be positive", self.epsilon),
            });
        }
        if let Some(v) = self.running_var.iter().find(|v| **v < 0.0) {
            return Err(TensorError::Invalid {
                op: "batchnorm",
                msg: format!("negative running variance {v}"),
            });
        }
        Ok(())
    }

    /// Fold batch statistics into the running averages.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var_unbiased: &[f64]) {
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * batch_mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * batch_var_unbiased[c];
        }
    }
}
