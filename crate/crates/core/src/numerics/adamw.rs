//! AdamW with decoupled weight decay.
//!
//! ```text
//! w ← w − lr·wd·w
//! m ← β1·m + (1 − β1)·g
//! v ← β2·v + (1 − β2)·g²
//! w ← w − lr · (m / (1 − β1^t)) / (√(v / (1 − β2^t)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{HvqError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(HvqError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Applies one AdamW update to every parameter using the gradients currently
/// stored in `params`, then advances the step counter.
pub fn adamw_step(params: &mut ParamStore, config: &OptimConfig) -> Result<()> {
    config.validate()?;
    params.step += 1;
    let t = params.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let lr = config.learning_rate;
    let decay = 1.0 - lr * config.weight_decay;
    for p in &mut params.params {
        for i in 0..p.value.len() {
            let g = p.grad[i];
            let m = config.beta1 * p.first_moment[i] + (1.0 - config.beta1) * g;
            let v = config.beta2 * p.second_moment[i] + (1.0 - config.beta2) * g * g;
            p.first_moment[i] = m;
            p.second_moment[i] = v;
            let w = p.value[i] * decay;
            p.value[i] = w - lr * (m / bc1) / ((v / bc2).sqrt() + config.epsilon);
        }
    }
    Ok(())
}
