use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::heads::{HeadMode, OrthoMode};

/// Batch sampling scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reweight {
    /// Shuffled passes over the data.
    #[default]
    None,
    /// Pick a domain uniformly, then a sample within it.
    ByDomain,
    /// Pick an occupied `(domain, class)` cell uniformly, then a sample within it.
    ByDomainClass,
}

/// Hyperparameters shared by the probing and finetuning loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the domain term during finetuning.
    pub lambda: f64,
    pub lambda_ortho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub reweight: Reweight,
    pub freeze_heads: bool,
    pub head_mode: HeadMode,
    pub ortho_mode: OrthoMode,
    pub weight_decay: f64,
    /// Iterations for each of the two probing steps.
    pub stage1_iters: usize,
    pub stage1_lr: f64,
    /// Project the class head off the domain head once probing finishes.
    pub projection_cleanup: bool,
    /// Largest `||W1 W2ᵀ||_F` accepted from the probe.
    pub ortho_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            lambda_ortho: 10.0,
            beta1: 20.0,
            beta2: 20.0,
            lr: 1e-3,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            reweight: Reweight::None,
            freeze_heads: true,
            head_mode: HeadMode::NormalizedNoBias,
            ortho_mode: OrthoMode::Penalty,
            weight_decay: 0.01,
            stage1_iters: 6000,
            stage1_lr: 1e-2,
            projection_cleanup: true,
            ortho_tol: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda", self.lambda),
            ("lambda_ortho", self.lambda_ortho),
            ("lr", self.lr),
            ("stage1_lr", self.stage1_lr),
            ("weight_decay", self.weight_decay),
            ("ortho_tol", self.ortho_tol),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return arg_err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v.is_finite()) {
                return arg_err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        // epochs = 0 is accepted: finetuning then returns its initialization.
        if self.batch_size == 0 {
            return arg_err("batch_size must be at least 1");
        }
        Ok(())
    }
}
