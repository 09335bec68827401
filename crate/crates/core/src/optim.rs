//! First-order optimizers with per-parameter moment buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADAPTIVE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    /// Bias-corrected first/second moments with element-wise scaling.
    Adaptive,
    /// `Adaptive` plus weight decay applied directly to the parameters.
    AdaptiveDecoupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub lr_proxy: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    /// Global gradient-norm clip; off when `None`.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::AdaptiveDecoupled,
            lr: 1e-3,
            lr_proxy: 1e-2,
            weight_decay: 1e-4,
            betas: [0.9, 0.999],
            max_grad_norm: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, path: &str| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(path, "must be finite and non-negative"))
            }
        };
        positive(self.lr, "optim.lr")?;
        positive(self.lr_proxy, "optim.lr_proxy")?;
        positive(self.weight_decay, "optim.weight_decay")?;
        for (i, b) in self.betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return Err(Error::config(
                    format!("optim.betas[{i}]"),
                    "must be in [0, 1)",
                ));
            }
        }
        if let Some(c) = self.max_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("optim.max_grad_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Moment buffers and step count of one parameter tensor. Buffers stay empty
/// under plain SGD.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl Moments {
    pub fn bytes(&self) -> usize {
        (self.m.len() + self.v.len()) * 4 + 8
    }

    pub fn bit_eq(&self, other: &Moments) -> bool {
        self.t == other.t
            && self.m.len() == other.m.len()
            && self.v.len() == other.v.len()
            && self
                .m
                .iter()
                .zip(&other.m)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self
                .v
                .iter()
                .zip(&other.v)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// One update of `param` in place. `grad` is already clipped/scaled.
pub fn update(param: &mut [f32], grad: &[f32], state: &mut Moments, lr: f64, cfg: &OptimConfig) {
    debug_assert_eq!(param.len(), grad.len());
    state.t += 1;
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (p, g) in param.iter_mut().zip(grad) {
                *p = (*p as f64 - lr * *g as f64) as f32;
            }
        }
        OptimizerKind::Adaptive | OptimizerKind::AdaptiveDecoupled => {
            if state.m.is_empty() {
                state.m = vec![0.0; param.len()];
                state.v = vec![0.0; param.len()];
            }
            let [b1, b2] = cfg.betas;
            let c1 = 1.0 - b1.powi(state.t as i32);
            let c2 = 1.0 - b2.powi(state.t as i32);
            let decay = if cfg.kind == OptimizerKind::AdaptiveDecoupled {
                lr * cfg.weight_decay
            } else {
                0.0
            };
            for i in 0..param.len() {
                let g = grad[i] as f64;
                let m = b1 * state.m[i] as f64 + (1.0 - b1) * g;
                let v = b2 * state.v[i] as f64 + (1.0 - b2) * g * g;
                state.m[i] = m as f32;
                state.v[i] = v as f32;
                let mut p = param[i] as f64;
                p -= decay * p;
                p -= lr * (m / c1) / ((v / c2).sqrt() + ADAPTIVE_EPS);
                param[i] = p as f32;
            }
        }
    }
}
