//! SGD, Adam and LARS over [`ModelParams`], plus the cosine learning-rate
//! schedule.
//!
//! Weight decay and LARS trust ratios skip bias and group-norm parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Lars,
}

impl OptimizerKind {
    pub fn code(self) -> u8 {
        match self {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => 1,
            OptimizerKind::Lars => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OptimizerKind::Sgd),
            1 => Some(OptimizerKind::Adam),
            2 => Some(OptimizerKind::Lars),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Decay `lr` with a cosine schedule over the run.
    pub cosine: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub trust_coefficient: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 1.0,
            cosine: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            momentum: 0.9,
            trust_coefficient: 1e-3,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig { lr, ..Self::default() }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            cosine: true,
            ..Self::default()
        }
    }

    pub fn lars(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Lars,
            lr,
            cosine: true,
            ..Self::default()
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("{field}.{what}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2 must lie in [0, 1)");
        }
        if self.eps < 0.0 || self.weight_decay < 0.0 || self.trust_coefficient <= 0.0 {
            return bad("eps, weight_decay must be >= 0 and trust_coefficient > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }

    /// Learning rate at `step` of `total` (constant unless `cosine`).
    pub fn lr_at(&self, step: usize, total: usize) -> Result<f64> {
        if self.cosine {
            cosine_lr(self.lr, step, total)
        } else {
            Ok(self.lr)
        }
    }
}

/// `base * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let progress = step as f64 / total_steps as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Bias and normalization parameters are exempt from decay and trust ratios.
pub fn is_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gn_scale") || name.ends_with(".gn_shift")
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    /// Adam first moment, or LARS velocity. Empty until the first update.
    pub first: ModelParams,
    /// Adam second moment. Empty for SGD and LARS.
    pub second: ModelParams,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: ModelParams::new(),
            second: ModelParams::new(),
        }
    }

    /// One update of `params` against `grads` with learning rate `lr`.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        params.check_aligned(grads)?;
        if lr < 0.0 {
            return Err(Error::InvalidConfig(format!("learning rate {lr} is negative")));
        }
        let c = self.config.clone();
        match c.kind {
            OptimizerKind::Sgd => {
                for ((name, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
                    let wd = if is_exempt(name) { 0.0 } else { c.weight_decay };
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * (gv + wd * *pv);
                    }
                }
            }
            OptimizerKind::Adam => {
                self.ensure_moments(params, true)?;
                let t = (self.step + 1) as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for ((((name, p), (_, g)), (_, m)), (_, v)) in params
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let wd = if is_exempt(name) { 0.0 } else { c.weight_decay };
                    let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for (k, &gv) in g.data().iter().enumerate() {
                        let gk = gv + wd * pd[k];
                        md[k] = c.beta1 * md[k] + (1.0 - c.beta1) * gk;
                        vd[k] = c.beta2 * vd[k] + (1.0 - c.beta2) * gk * gk;
                        let mhat = md[k] / bc1;
                        let vhat = vd[k] / bc2;
                        pd[k] -= lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
            OptimizerKind::Lars => {
                self.ensure_moments(params, false)?;
                for (((name, p), (_, g)), (_, vel)) in params.iter_mut().zip(grads.iter()).zip(self.first.iter_mut()) {
                    let exempt = is_exempt(name);
                    let wd = if exempt { 0.0 } else { c.weight_decay };
                    let update: Vec<f64> = g.data().iter().zip(p.data()).map(|(gv, pv)| gv + wd * pv).collect();
                    let trust = if exempt {
                        1.0
                    } else {
                        let pn = p.norm();
                        let un = update.iter().map(|u| u * u).sum::<f64>().sqrt();
                        if pn > 0.0 && un > 0.0 {
                            c.trust_coefficient * pn / un
                        } else {
                            1.0
                        }
                    };
                    let (pd, vd) = (p.data_mut(), vel.data_mut());
                    for (k, u) in update.iter().enumerate() {
                        vd[k] = c.momentum * vd[k] + trust * u;
                        pd[k] -= lr * vd[k];
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }

    fn ensure_moments(&mut self, params: &ModelParams, second: bool) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.zeros_like();
        }
        if second && self.second.is_empty() {
            self.second = params.zeros_like();
        }
        params.check_aligned(&self.first)?;
        if second {
            params.check_aligned(&self.second)?;
        }
        Ok(())
    }
}
