//! Divergence detection on the training loss stream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuardParams {
    /// EMA decay: `ema ← decay · ema + (1 − decay) · loss`.
    pub decay: f64,
    pub factor: f64,
    pub patience: usize,
    /// Training steps averaged into one guard evaluation.
    pub interval: usize,
}

impl Default for GuardParams {
    fn default() -> Self {
        GuardParams { decay: 0.9, factor: 1.5, patience: 5, interval: 10 }
    }
}

impl GuardParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.decay) || !(self.factor > 1.0) || self.patience == 0 || self.interval == 0 {
            return Err(Error::Config(format!("invalid divergence guard parameters {self:?}")));
        }
        Ok(())
    }

    /// Log message for a guard that fired on `loss` at `step`.
    pub fn trip_reason(&self, loss: f64, step: usize) -> String {
        if loss.is_finite() {
            format!("loss average above {}× its minimum for {} evaluations at step {step}", self.factor, self.patience)
        } else {
            format!("loss is {loss} at step {step}")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Health {
    Healthy,
    Diverged,
}

/// Streaming form of [`divergence_guard`] over training steps: every
/// `interval` step losses are averaged into one evaluation.
#[derive(Debug, Clone)]
pub struct DivergenceGuard {
    params: GuardParams,
    ema: Option<f64>,
    min_ema: f64,
    streak: usize,
    tripped: bool,
    pending: Vec<f64>,
}

impl DivergenceGuard {
    pub fn new(params: GuardParams) -> Self {
        DivergenceGuard { params, ema: None, min_ema: f64::INFINITY, streak: 0, tripped: false, pending: Vec::new() }
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema
    }

    /// Feeds one step loss; non-finite losses trip the guard at once.
    pub fn observe_step(&mut self, loss: f64) -> Health {
        if self.tripped || !loss.is_finite() {
            self.tripped = true;
            return Health::Diverged;
        }
        self.pending.push(loss);
        if self.pending.len() < self.params.interval {
            return Health::Healthy;
        }
        let mean = self.pending.iter().sum::<f64>() / self.pending.len() as f64;
        self.pending.clear();
        self.observe(mean)
    }

    /// Feeds one loss evaluation. Once diverged, stays diverged.
    pub fn observe(&mut self, loss: f64) -> Health {
        if self.tripped || !loss.is_finite() {
            self.tripped = true;
            return Health::Diverged;
        }
        let d = self.params.decay;
        let ema = match self.ema {
            None => loss,
            Some(e) => d * e + (1.0 - d) * loss,
        };
        self.ema = Some(ema);
        self.min_ema = self.min_ema.min(ema);
        if ema > self.params.factor * self.min_ema {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= self.params.patience {
            self.tripped = true;
            return Health::Diverged;
        }
        Health::Healthy
    }
}

/// Diverged iff a loss is non-finite, or the loss EMA stays above
/// `factor ×` its running minimum for `patience` consecutive evaluations.
pub fn divergence_guard(window: &[f64], params: GuardParams) -> Result<Health> {
    params.validate()?;
    if window.len() < params.patience {
        return Err(Error::Parameter(format!("window of {} evaluations, need at least {}", window.len(), params.patience)));
    }
    let mut guard = DivergenceGuard::new(params);
    let mut health = Health::Healthy;
    for &x in window {
        health = guard.observe(x);
    }
    Ok(health)
}
