//! Parameter updates.
//!
//! One backward pass through the full graph yields, for the shared
//! extractor, `dL_cl/dθ_conv − λ dL_r/dθ_conv` (the reversal layer folds in
//! `−λ`), and plain `dL_cl/dθ_cl`, `dL_r/dθ_r` for the heads. The update
//! scales each group's step by a rate multiplier; the stain-adversarial
//! schedule uses `(1, 1, λ)`.

use serde::{Deserialize, Serialize};

use super::params::{GroupKind, ModelGrads, ModelParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    /// Decoupled shrinkage: each step also subtracts `rate * decay * θ`.
    pub weight_decay: f64,
    pub algorithm: Algorithm,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            algorithm: Algorithm::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn sgd(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            algorithm: Algorithm::Sgd,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be > 0 and decay >= 0, got {} and {}",
                self.learning_rate, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Optimizer configuration plus per-tensor Adam moments.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: u64,
    first: Option<ModelParams>,
    second: Option<ModelParams>,
}

impl OptimState {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            step: 0,
            first: None,
            second: None,
        }
    }
}

/// Per-group multipliers of the learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub conv: f64,
    pub classifier: f64,
    pub regressor: f64,
}

impl GroupRates {
    /// The stain-adversarial schedule: the adversarial head moves at `λμ`.
    pub fn adversarial(lambda: f64) -> Self {
        Self {
            conv: 1.0,
            classifier: 1.0,
            regressor: lambda,
        }
    }

    pub const UNIFORM: Self = Self {
        conv: 1.0,
        classifier: 1.0,
        regressor: 1.0,
    };

    fn of(&self, kind: GroupKind) -> f64 {
        match kind {
            GroupKind::Conv => self.conv,
            GroupKind::Classifier => self.classifier,
            GroupKind::Regressor => self.regressor,
        }
    }
}

/// θ_conv ← θ_conv − μ(∂L_cl/∂θ_conv − λ ∂L_r/∂θ_conv),
/// θ_cl ← θ_cl − μ ∂L_cl/∂θ_cl, θ_r ← θ_r − λμ ∂L_r/∂θ_r
/// (with Adam, `μ·g` becomes the Adam direction scaled by the same rates).
pub fn apply_update(
    params: &mut ModelParams,
    grads: &ModelGrads,
    opt: &mut OptimState,
    lambda: f64,
) -> Result<()> {
    apply_update_with_rates(params, grads, opt, GroupRates::adversarial(lambda), 0)
}

/// General form of [`apply_update`]; `epoch` is only used for error reports.
pub fn apply_update_with_rates(
    params: &mut ModelParams,
    grads: &ModelGrads,
    opt: &mut OptimState,
    rates: GroupRates,
    epoch: usize,
) -> Result<()> {
    for (kind, name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: format!("{}.{name}", kind.name()),
                epoch,
            });
        }
    }
    let cfg = opt.config;
    opt.step += 1;
    let t = opt.step as i32;
    match cfg.algorithm {
        Algorithm::Sgd => {
            for kind in GroupKind::ALL {
                let lr = cfg.learning_rate * rates.of(kind);
                for (p, g) in params.group_mut(kind).tensors.iter_mut().zip(&grads.group(kind).tensors) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * (gv + cfg.weight_decay * *pv);
                    }
                }
            }
        }
        Algorithm::Adam => {
            let first = opt.first.get_or_insert_with(|| params.zeros_like());
            let second = opt.second.get_or_insert_with(|| params.zeros_like());
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for kind in GroupKind::ALL {
                let lr = cfg.learning_rate * rates.of(kind);
                let ps = &mut params.group_mut(kind).tensors;
                let gs = &grads.group(kind).tensors;
                let ms = &mut first.group_mut(kind).tensors;
                let vs = &mut second.group_mut(kind).tensors;
                for (((p, g), m), v) in ps.iter_mut().zip(gs).zip(ms.iter_mut()).zip(vs.iter_mut()) {
                    adam_tensor(p, g, m, v, &cfg, lr, bc1, bc2);
                }
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adam_tensor(
    p: &mut Tensor,
    g: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    cfg: &OptimConfig,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for (((pv, &gv), mv), vv) in p
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
        *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
        let step = (*mv / bc1) / ((*vv / bc2).sqrt() + cfg.eps);
        *pv -= lr * (step + cfg.weight_decay * *pv);
    }
}
