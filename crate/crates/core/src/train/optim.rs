//! Plain SGD and stochastic conjugate gradient with a bounded Armijo search.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type ParamMap<T> = IndexMap<String, Tensor<T>>;

fn dot<T: Scalar>(a: &ParamMap<T>, b: &ParamMap<T>) -> f64 {
    a.iter()
        .map(|(k, x)| {
            let y = &b[k];
            x.data().iter().zip(y.data()).map(|(p, q)| p.as_f64() * q.as_f64()).sum::<f64>()
        })
        .sum()
}

pub fn norm<T: Scalar>(a: &ParamMap<T>) -> f64 {
    dot(a, a).sqrt()
}

/// `a + s · b` per tensor.
fn axpy<T: Scalar>(a: &ParamMap<T>, s: f64, b: &ParamMap<T>) -> ParamMap<T> {
    let s = T::from_f64_lossy(s);
    a.iter()
        .map(|(k, x)| {
            let y = &b[k];
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + s * q).collect();
            (k.clone(), Tensor::new(x.shape(), data).expect("same shape"))
        })
        .collect()
}

fn check_grads<T: Scalar>(params: &ParamMap<T>, grads: &ParamMap<T>) -> Result<()> {
    for (k, p) in params {
        let g = grads.get(k).ok_or_else(|| Error::Contract(format!("no gradient for {k}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Dimension(format!("gradient for {k} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NumericFault(format!("non-finite gradient for {k}")));
        }
    }
    Ok(())
}

/// `p ← p − lr · g` for every parameter.
pub fn sgd_step<T: Scalar>(params: &mut ParamMap<T>, grads: &ParamMap<T>, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Parameter(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    check_grads(params, grads)?;
    *params = axpy(params, -lr, grads);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScgdParams {
    pub c1: f64,
    pub backtrack: f64,
    pub max_trials: usize,
    pub initial_step: f64,
    /// Steepest-descent restart period in steps.
    pub restart_every: usize,
}

impl Default for ScgdParams {
    fn default() -> Self {
        ScgdParams { c1: 1e-4, backtrack: 0.5, max_trials: 3, initial_step: 1.0, restart_every: 20 }
    }
}

impl ScgdParams {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.max_trials) {
            return Err(Error::Config(format!("line search trials must be in 1..=3, got {}", self.max_trials)));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) || !(self.c1 > 0.0 && self.c1 < 1.0) {
            return Err(Error::Config("backtrack factor and c1 must lie in (0, 1)".into()));
        }
        if !(self.initial_step > 0.0) || self.restart_every == 0 {
            return Err(Error::Config("initial step and restart period must be positive".into()));
        }
        Ok(())
    }
}

/// Direction memory carried across mini-batches.
#[derive(Debug, Clone)]
pub struct ScgdState<T: Scalar> {
    pub params: ScgdParams,
    pub step: usize,
    prev_grad: Option<ParamMap<T>>,
    prev_dir: Option<ParamMap<T>>,
}

impl<T: Scalar> ScgdState<T> {
    pub fn new(params: ScgdParams) -> Self {
        ScgdState { params, step: 0, prev_grad: None, prev_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss_before: f64,
    pub loss_after: f64,
    pub step_size: f64,
    pub accepted: bool,
    pub evaluations: usize,
    pub grad_norm: f64,
    /// Polak–Ribière coefficient used, zero on restarts.
    pub beta: f64,
}

/// Loss at a parameter point; the flag asks for gradients as well.
pub trait Objective<T: Scalar> {
    fn evaluate(&mut self, params: &ParamMap<T>, need_grad: bool) -> Result<(f64, Option<ParamMap<T>>)>;
}

impl<T: Scalar, F> Objective<T> for F
where
    F: FnMut(&ParamMap<T>, bool) -> Result<(f64, Option<ParamMap<T>>)>,
{
    fn evaluate(&mut self, params: &ParamMap<T>, need_grad: bool) -> Result<(f64, Option<ParamMap<T>>)> {
        self(params, need_grad)
    }
}

/// One conjugate-gradient step on a fixed mini-batch objective.
///
/// Direction `d = −g + max(0, β_PR) · d_prev`, reset to `−g` on the first
/// step, every `restart_every` steps, or when `d` is not a descent
/// direction. Step sizes `initial_step · backtrack^t` for `t < max_trials`
/// are tried until Armijo's condition holds; without acceptance the smallest
/// trial with a finite loss is taken.
pub fn scgd_step<T: Scalar>(params: &mut ParamMap<T>, state: &mut ScgdState<T>, objective: &mut impl Objective<T>) -> Result<StepReport> {
    let cfg = state.params;
    cfg.validate()?;
    let (f0, grad) = objective.evaluate(params, true)?;
    let grad = grad.ok_or_else(|| Error::Contract("objective returned no gradient".into()))?;
    if !f0.is_finite() {
        return Err(Error::NumericFault(format!("loss is {f0} at the current parameters")));
    }
    check_grads(params, &grad)?;
    let gg = dot(&grad, &grad);
    let restart = state.step % cfg.restart_every == 0;
    let steepest: ParamMap<T> = grad.iter().map(|(k, g)| (k.clone(), g.map(|v| -v))).collect();
    let (mut dir, mut beta) = match (&state.prev_grad, &state.prev_dir) {
        (Some(pg), Some(pd)) if !restart => {
            let denom = dot(pg, pg);
            let beta = if denom > 0.0 { ((gg - dot(&grad, pg)) / denom).max(0.0) } else { 0.0 };
            (axpy(&steepest, beta, pd), beta)
        }
        _ => (steepest.clone(), 0.0),
    };
    let mut slope = dot(&grad, &dir);
    if slope >= 0.0 && gg > 0.0 {
        dir = steepest;
        slope = -gg;
        beta = 0.0;
    }

    let mut evaluations = 1;
    let mut alpha = cfg.initial_step;
    let mut fallback: Option<(f64, f64, ParamMap<T>)> = None;
    let mut accepted = None;
    for _ in 0..cfg.max_trials {
        let trial = axpy(params, alpha, &dir);
        let (f, _) = objective.evaluate(&trial, false)?;
        evaluations += 1;
        if f.is_finite() {
            if f <= f0 + cfg.c1 * alpha * slope {
                accepted = Some((alpha, f, trial));
                break;
            }
            fallback = Some((alpha, f, trial));
        }
        alpha *= cfg.backtrack;
    }
    let was_accepted = accepted.is_some();
    let (step_size, loss_after, next) = accepted
        .or(fallback)
        .ok_or_else(|| Error::NumericFault("loss is non-finite at every line-search trial".into()))?;
    *params = next;
    state.prev_grad = Some(grad);
    state.prev_dir = Some(dir);
    state.step += 1;
    Ok(StepReport {
        loss_before: f0,
        loss_after,
        step_size,
        accepted: was_accepted,
        evaluations,
        grad_norm: gg.sqrt(),
        beta,
    })
}
