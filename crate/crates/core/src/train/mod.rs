//! End-to-end training strategies, the shared optimization step, and
//! evaluation.

mod guard;
mod optim;

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use guard::{divergence_guard, DivergenceGuard, GuardParams, Health};
pub use optim::{norm, scgd_step, sgd_step, Objective, ParamMap, ScgdParams, ScgdState, StepReport};

use crate::data::{bgc_batch_sampler, flying_cars_composite, preprocess, BatchPlan, Domain, Sample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NodeId};
use crate::loss::{argmax_channels, class_frequencies, expected_weight, loss_bgc_proportioned, loss_wce, wce_weights, ClassStats, VOID};
use crate::metrics::{metrics, ConfusionMatrix, Metrics};
use crate::model::{Bound, Model};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Samples per forward pass when evaluating or caching predictions.
pub const EVAL_BATCH: usize = 8;

/// Void pixels of a sparse sample farther than this (Chebyshev distance)
/// from any annotation count as background for a catch-all channel.
pub const CATCH_ALL_MARGIN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    E2eDense,
    E2eSparse,
    E2eMixed,
    Bgc,
    FlyingCars,
    EnsembleFusion,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::E2eDense,
        Strategy::E2eSparse,
        Strategy::E2eMixed,
        Strategy::Bgc,
        Strategy::FlyingCars,
        Strategy::EnsembleFusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::E2eDense => "e2e_dense",
            Strategy::E2eSparse => "e2e_sparse",
            Strategy::E2eMixed => "e2e_mixed",
            Strategy::Bgc => "bgc",
            Strategy::FlyingCars => "flying_cars",
            Strategy::EnsembleFusion => "ensemble_fusion",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let norm = s.replace('-', "_");
        Strategy::ALL.into_iter().find(|k| k.as_str() == norm).ok_or_else(|| {
            let names: Vec<&str> = Strategy::ALL.iter().map(|k| k.as_str()).collect();
            format!("unknown strategy {s:?}, expected one of {}", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Scgd,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    /// Zero derives one epoch from the pool size and the batch size.
    pub steps_per_epoch: usize,
    /// Domain proportions for bgc and ensemble_fusion; the other strategies
    /// draw `n_dense + n_sparse` samples from their pool.
    pub batch: BatchPlan,
    pub optimizer: OptimizerKind,
    /// SGD only.
    pub learning_rate: f64,
    pub line_search: ScgdParams,
    pub seed: u64,
    pub guard: GuardParams,
    /// Inverse-frequency class weights; plain cross-entropy when off.
    pub class_weighting: bool,
    /// Composites added to the pool per dense sample (flying_cars).
    pub composite_share: f64,
    /// Evaluation samples scored after each epoch; zero disables snapshots.
    pub snapshot_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::E2eDense,
            epochs: 5,
            steps_per_epoch: 0,
            batch: BatchPlan::default(),
            optimizer: OptimizerKind::Scgd,
            learning_rate: 0.01,
            line_search: ScgdParams::default(),
            seed: 0,
            guard: GuardParams::default(),
            class_weighting: true,
            composite_share: 1.0,
            snapshot_samples: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.batch.validate()?;
        self.line_search.validate()?;
        self.guard.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        if !(self.composite_share > 0.0) || !self.composite_share.is_finite() {
            return Err(Error::Config(format!("composite_share must be positive, got {}", self.composite_share)));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.batch.n_dense + self.batch.n_sparse
    }
}

/// Labeled training pools and an optional evaluation set for snapshots.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainData<'a> {
    pub dense: &'a [Sample],
    pub sparse: &'a [Sample],
    pub eval: &'a [Sample],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub loss: f64,
    pub grad_norm: f64,
    pub step_size: f64,
    pub evaluations: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_mean: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_var: f64,
    pub snapshot: Option<Metrics>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Mean and population variance; zeros for an empty slice.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,split,loss,grad_norm_mean,grad_norm_var,per_class,global";

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Mean and variance of the gradient norm over all steps.
    pub fn grad_norm_stats(&self) -> (f64, f64) {
        mean_var(&self.steps.iter().map(|s| s.grad_norm).collect::<Vec<_>>())
    }

    /// One `train` row per epoch, followed by an `eval` row when a metric
    /// snapshot was taken.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},train,{:.6},{:.6},{:.6},,",
                e.epoch, e.loss_mean, e.grad_norm_mean, e.grad_norm_var
            );
            if let Some(m) = &e.snapshot {
                let _ = writeln!(out, "{},eval,,,,{:.2},{:.2}", e.epoch, m.per_class, m.global);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub status: RunStatus,
    /// Why the guard fired.
    pub reason: Option<String>,
    pub log: TrainLog,
}

/// One preprocessed sample: `[1, C, H, W]` network input and its labels in
/// the model's channel space.
#[derive(Debug, Clone)]
pub(crate) struct Example {
    pub x: Tensor<f32>,
    pub labels: Vec<u8>,
}

/// Network input for a sample: preprocessed and shaped `[1, 3, H, W]`.
pub fn prepare_input(sample: &Sample) -> Result<Tensor<f32>> {
    let (h, w) = (sample.height(), sample.width());
    preprocess(&sample.image)?.reshape(&[1, 3, h, w])
}

/// Translates palette labels to output channels of a model with the given
/// alignment. Classes the model does not predict go to its catch-all
/// channel, or to void without one. For sparse samples, void pixels well
/// away from any annotation also go to the catch-all channel.
pub fn map_labels(labels: &[u8], width: usize, height: usize, alignment: &[Option<u8>], domain: Domain) -> Result<Vec<u8>> {
    if labels.len() != width * height {
        return Err(Error::Dimension(format!("{} labels for a {width}×{height} map", labels.len())));
    }
    let identity = alignment.iter().enumerate().all(|(i, a)| *a == Some(i as u8));
    if identity {
        return Ok(labels.to_vec());
    }
    let catch_all = alignment.iter().position(|a| a.is_none()).map(|c| c as u8);
    let mut lut = [catch_all.unwrap_or(VOID); 256];
    lut[VOID as usize] = VOID;
    for (ch, a) in alignment.iter().enumerate() {
        if let Some(c) = a {
            lut[*c as usize] = ch as u8;
        }
    }
    let mut out: Vec<u8> = labels.iter().map(|&l| lut[l as usize]).collect();
    if let (Some(bg), Domain::Sparse) = (catch_all, domain) {
        let m = CATCH_ALL_MARGIN as i64;
        for y in 0..height as i64 {
            for x in 0..width as i64 {
                if labels[(y as usize) * width + x as usize] != VOID {
                    continue;
                }
                let near = (-m..=m).any(|dy| {
                    (-m..=m).any(|dx| {
                        let (nx, ny) = (x + dx, y + dy);
                        nx >= 0
                            && ny >= 0
                            && nx < width as i64
                            && ny < height as i64
                            && labels[ny as usize * width + nx as usize] != VOID
                    })
                });
                if !near {
                    out[y as usize * width + x as usize] = bg;
                }
            }
        }
    }
    Ok(out)
}

fn labeled_example(sample: &Sample, alignment: &[Option<u8>]) -> Result<Example> {
    let labels = sample.labels.as_ref().ok_or_else(|| Error::Data(format!("{}: training sample without labels", sample.id)))?;
    Ok(Example {
        x: prepare_input(sample)?,
        labels: map_labels(labels, sample.width(), sample.height(), alignment, sample.domain)?,
    })
}

/// Class weights of a pool and their mean per-pixel value.
fn class_weights(examples: &[&Example], classes: usize, enabled: bool) -> Result<(Vec<f64>, f64)> {
    if !enabled {
        return Ok((vec![1.0; classes], 1.0));
    }
    let stats: ClassStats = class_frequencies(examples.iter().map(|e| e.labels.as_slice()), classes, VOID)?;
    let omega = wce_weights(&stats);
    let kappa = expected_weight(&stats, &omega);
    Ok((omega, kappa))
}

/// Splits `[N, ...]` into `N` tensors of shape `[1, ...]`.
pub(crate) fn unstack<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let n = t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = 1;
    let per = t.len() / n;
    t.data().chunks(per).map(|c| Tensor::new(&shape, c.to_vec())).collect()
}

fn stack(examples: &[&Example]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let x = Tensor::stack_batch(&examples.iter().map(|e| &e.x).collect::<Vec<_>>())?;
    let labels = examples.iter().flat_map(|e| e.labels.iter().copied()).collect();
    Ok((x, labels))
}

/// Optimizer plus its state across steps.
#[derive(Debug, Clone)]
pub(crate) enum Optimizer {
    Scgd(ScgdState<f32>),
    Sgd(f64),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, line_search: ScgdParams) -> Self {
        match kind {
            OptimizerKind::Scgd => Optimizer::Scgd(ScgdState::new(line_search)),
            OptimizerKind::Sgd => Optimizer::Sgd(learning_rate),
        }
    }
}

/// One optimization step of the model's own parameters on a fixed batch.
/// Running statistics follow the gradient point only; dropout masks are
/// identical across the line-search evaluations.
///
/// The optimizer sees the loss divided by `weight_scale`, the mean pixel
/// weight of the loss, which puts class-weighted objectives on the scale of
/// plain cross-entropy. Recorded losses and gradient norms are unscaled.
pub(crate) fn optimize_step(
    model: &mut Model<f32>,
    opt: &mut Optimizer,
    x: &Tensor<f32>,
    dropout_seed: u64,
    weight_scale: f64,
    loss_fn: &dyn Fn(&mut Graph<f32>, NodeId) -> Result<NodeId>,
) -> Result<StepRecord> {
    if !(weight_scale > 0.0) || !weight_scale.is_finite() {
        return Err(Error::Parameter(format!("loss weight scale must be positive, got {weight_scale}")));
    }
    let mut params = std::mem::take(model.params_mut());
    let result = {
        let mut evaluate = |p: &ParamMap<f32>, need_grad: bool| -> Result<(f64, Option<ParamMap<f32>>)> {
            let mut g = Graph::new();
            let bound = Bound::from_params(&mut g, p, need_grad);
            let xi = g.leaf(x.clone());
            let mut rng = RngState::new(dropout_seed);
            let logits = model.forward_head(&mut g, &bound, xi, Mode::Train, &mut rng, need_grad)?;
            let raw = loss_fn(&mut g, logits)?;
            let loss = if weight_scale == 1.0 { raw } else { g.scale(raw, (1.0 / weight_scale) as f32)? };
            let value = g.value(loss).item().as_f64();
            if !need_grad {
                return Ok((value, None));
            }
            let mut grads = g.backward(loss)?;
            let map = bound.iter().map(|(k, id)| (k.to_string(), grads.take(id))).collect();
            Ok((value, Some(map)))
        };
        match opt {
            Optimizer::Scgd(state) => scgd_step(&mut params, state, &mut evaluate).map(|r| StepRecord {
                loss: r.loss_before * weight_scale,
                grad_norm: r.grad_norm * weight_scale,
                step_size: r.step_size,
                evaluations: r.evaluations,
                accepted: r.accepted,
            }),
            Optimizer::Sgd(lr) => evaluate(&params, true).and_then(|(loss, grads)| {
                if !loss.is_finite() {
                    return Err(Error::NumericFault(format!("loss is {loss} at the current parameters")));
                }
                let grads = grads.expect("gradients requested");
                sgd_step(&mut params, &grads, *lr)?;
                Ok(StepRecord {
                    loss: loss * weight_scale,
                    grad_norm: norm(&grads) * weight_scale,
                    step_size: *lr,
                    evaluations: 1,
                    accepted: true,
                })
            }),
        }
    };
    *model.params_mut() = params;
    result
}

/// How a strategy draws its batches and scores them.
enum Plan {
    /// Uniform draws with replacement from `pool`, one weighted loss.
    Uniform { pool: Vec<usize>, omega: Vec<f64>, kappa: f64 },
    /// Fixed dense/sparse proportions with per-part normalization.
    Balanced { dense: Vec<usize>, sparse: Vec<usize>, omega_dense: Vec<f64>, omega_sparse: Vec<f64>, kappa: f64 },
}

impl Plan {
    fn weight_scale(&self) -> f64 {
        match self {
            Plan::Uniform { kappa, .. } | Plan::Balanced { kappa, .. } => *kappa,
        }
    }
}

fn require(pool: &[Sample], what: &str, strategy: Strategy) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::Config(format!("strategy {strategy} needs {what} samples, none given")));
    }
    Ok(())
}

fn base_prob_examples(model: &Model<f32>, samples: &[Sample]) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let inputs = chunk.iter().map(prepare_input).collect::<Result<Vec<_>>>()?;
        let probs = model.base_probs(&Tensor::stack_batch(&inputs.iter().collect::<Vec<_>>())?)?;
        for (s, x) in chunk.iter().zip(unstack(&probs)?) {
            let labels = s.labels.clone().ok_or_else(|| Error::Data(format!("{}: training sample without labels", s.id)))?;
            out.push(Example { x, labels });
        }
    }
    Ok(out)
}

/// Trains `model` in place with the configured strategy. Divergence is a
/// reportable outcome, not an error; the model keeps its last parameters.
pub fn train(model: &mut Model<f32>, data: TrainData<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let strategy = config.strategy;
    let is_ensemble = !model.bases().is_empty();
    if is_ensemble != (strategy == Strategy::EnsembleFusion) {
        return Err(Error::Config(if is_ensemble {
            format!("an ensemble model can only be trained with ensemble_fusion, not {strategy}")
        } else {
            "ensemble_fusion needs an ensemble model".to_string()
        }));
    }
    let divisor = model.config().spatial_divisor();
    for s in data.dense.iter().chain(data.sparse) {
        if s.height() % divisor != 0 || s.width() % divisor != 0 {
            return Err(Error::Dimension(format!("{}: {}×{} not divisible by {divisor}", s.id, s.width(), s.height())));
        }
    }
    let classes = model.num_classes();
    let alignment = model.config().alignment();
    let weighting = config.class_weighting;
    let rng = RngState::new(config.seed);
    let lambda = config.batch.lambda;
    let balanced = |examples: &[Example], n_dense: usize| -> Result<Plan> {
        let (d, s) = examples.split_at(n_dense);
        let (omega_dense, kd) = class_weights(&d.iter().collect::<Vec<_>>(), classes, weighting)?;
        let (omega_sparse, ks) =
            if s.is_empty() { (vec![1.0; classes], 1.0) } else { class_weights(&s.iter().collect::<Vec<_>>(), classes, weighting)? };
        let kappa = if s.is_empty() { kd } else { (kd + lambda * ks) / (1.0 + lambda) };
        Ok(Plan::Balanced { dense: (0..n_dense).collect(), sparse: (n_dense..examples.len()).collect(), omega_dense, omega_sparse, kappa })
    };
    let uniform = |examples: &[Example]| -> Result<Plan> {
        let (omega, kappa) = class_weights(&examples.iter().collect::<Vec<_>>(), classes, weighting)?;
        Ok(Plan::Uniform { pool: (0..examples.len()).collect(), omega, kappa })
    };
    let labeled = |pool: &[Sample]| pool.iter().map(|s| labeled_example(s, &alignment)).collect::<Result<Vec<_>>>();

    let (examples, plan) = match strategy {
        Strategy::E2eDense => {
            require(data.dense, "dense", strategy)?;
            let ex = labeled(data.dense)?;
            let p = uniform(&ex)?;
            (ex, p)
        }
        Strategy::E2eSparse => {
            require(data.sparse, "sparse", strategy)?;
            let ex = labeled(data.sparse)?;
            let p = uniform(&ex)?;
            (ex, p)
        }
        Strategy::E2eMixed => {
            require(data.dense, "dense", strategy)?;
            require(data.sparse, "sparse", strategy)?;
            let mut ex = labeled(data.dense)?;
            ex.extend(labeled(data.sparse)?);
            let p = uniform(&ex)?;
            (ex, p)
        }
        Strategy::Bgc => {
            require(data.dense, "dense", strategy)?;
            if config.batch.n_sparse > 0 {
                require(data.sparse, "sparse", strategy)?;
            }
            let mut ex = labeled(data.dense)?;
            ex.extend(labeled(data.sparse)?);
            let p = balanced(&ex, data.dense.len())?;
            (ex, p)
        }
        Strategy::FlyingCars => {
            require(data.dense, "dense", strategy)?;
            require(data.sparse, "sparse", strategy)?;
            let mut ex = labeled(data.dense)?;
            let count = (config.composite_share * data.dense.len() as f64).round().max(1.0) as usize;
            let mut crng = rng.split(3);
            for _ in 0..count {
                let d = &data.dense[crng.index(data.dense.len())];
                let s = &data.sparse[crng.index(data.sparse.len())];
                let composite = flying_cars_composite(d, s, &mut crng)?;
                for w in &composite.warnings {
                    log::debug!("{w}");
                }
                ex.push(labeled_example(&composite.sample, &alignment)?);
            }
            let p = uniform(&ex)?;
            (ex, p)
        }
        Strategy::EnsembleFusion => {
            require(data.dense, "dense", strategy)?;
            if config.batch.n_sparse > 0 {
                require(data.sparse, "sparse", strategy)?;
            }
            let mut ex = base_prob_examples(model, data.dense)?;
            let sparse: &[Sample] = if config.batch.n_sparse > 0 { data.sparse } else { &[] };
            ex.extend(base_prob_examples(model, sparse)?);
            let p = balanced(&ex, data.dense.len())?;
            (ex, p)
        }
    };

    let batch_size = config.batch_size();
    let steps_per_epoch = match config.steps_per_epoch {
        0 => examples.len().div_ceil(batch_size).max(1),
        n => n,
    };
    let mut batch_rng = rng.split(1);
    let mut seed_rng = rng.split(2);
    let mut sampler = match &plan {
        Plan::Balanced { dense, sparse, .. } => Some(bgc_batch_sampler(dense.len(), sparse.len(), config.batch, rng.split(4))?),
        Plan::Uniform { .. } => None,
    };
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, config.line_search);
    let mut guard = DivergenceGuard::new(config.guard);
    let mut log = TrainLog::default();
    let mut status = RunStatus::Completed;
    let mut reason = None;
    let snapshot: &[Sample] = &data.eval[..config.snapshot_samples.min(data.eval.len())];
    let can_snapshot = alignment.iter().all(|a| a.is_some()) && !snapshot.is_empty();

    for epoch in 0..config.epochs {
        let first_step = log.steps.len();
        for _ in 0..steps_per_epoch {
            let (chosen, n_dense): (Vec<&Example>, usize) = match (&plan, sampler.as_mut()) {
                (Plan::Uniform { pool, .. }, _) => {
                    ((0..batch_size).map(|_| &examples[pool[batch_rng.index(pool.len())]]).collect(), batch_size)
                }
                (Plan::Balanced { dense, sparse, .. }, Some(s)) => {
                    let b = s.next().expect("endless sampler");
                    let mut chosen: Vec<&Example> = b.dense.iter().map(|&i| &examples[dense[i]]).collect();
                    chosen.extend(b.sparse.iter().map(|&i| &examples[sparse[i]]));
                    (chosen, b.dense.len())
                }
                (Plan::Balanced { .. }, None) => unreachable!("balanced plan without sampler"),
            };
            let (x, labels) = stack(&chosen)?;
            let loss_fn = |g: &mut Graph<f32>, logits: NodeId| -> Result<NodeId> {
                match &plan {
                    Plan::Uniform { omega, .. } => loss_wce(g, logits, &labels, omega, VOID),
                    Plan::Balanced { omega_dense, omega_sparse, .. } => {
                        loss_bgc_proportioned(g, logits, &labels, n_dense, config.batch.lambda, omega_dense, omega_sparse)
                    }
                }
            };
            match optimize_step(model, &mut opt, &x, seed_rng.next_seed(), plan.weight_scale(), &loss_fn) {
                Ok(record) => {
                    let loss = record.loss;
                    log.steps.push(record);
                    if guard.observe_step(loss) == Health::Diverged {
                        status = RunStatus::Diverged;
                        reason = Some(config.guard.trip_reason(loss, log.steps.len()));
                        break;
                    }
                }
                Err(Error::NumericFault(msg)) => {
                    status = RunStatus::Diverged;
                    reason = Some(format!("step {}: {msg}", log.steps.len() + 1));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let steps = &log.steps[first_step..];
        let (loss_mean, _) = mean_var(&steps.iter().map(|s| s.loss).collect::<Vec<_>>());
        let (grad_norm_mean, grad_norm_var) = mean_var(&steps.iter().map(|s| s.grad_norm).collect::<Vec<_>>());
        let snapshot = if can_snapshot && status == RunStatus::Completed {
            Some(metrics(&evaluate(model, snapshot)?)?)
        } else {
            None
        };
        log::info!(
            "{strategy} epoch {}: loss {loss_mean:.4}, grad norm {grad_norm_mean:.4}{}",
            epoch + 1,
            snapshot.as_ref().map(|m| format!(", per-class {:.1} global {:.1}", m.per_class, m.global)).unwrap_or_default()
        );
        log.epochs.push(EpochRecord { epoch: epoch + 1, loss_mean, grad_norm_mean, grad_norm_var, snapshot });
        if status == RunStatus::Diverged {
            log::warn!("{strategy} diverged: {}", reason.as_deref().unwrap_or(""));
            break;
        }
    }
    Ok(TrainOutcome { status, reason, log })
}

/// Eval-mode palette predictions per sample. Needs a model whose channels
/// all map to palette classes.
pub fn predict_labels(model: &Model<f32>, samples: &[Sample]) -> Result<Vec<Vec<u8>>> {
    let alignment = model.config().alignment();
    let lut: Vec<u8> = alignment
        .iter()
        .map(|a| a.ok_or_else(|| Error::Config("model has a catch-all channel and cannot be scored on the palette".into())))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let inputs = chunk.iter().map(prepare_input).collect::<Result<Vec<_>>>()?;
        let logits = model.predict(&Tensor::stack_batch(&inputs.iter().collect::<Vec<_>>())?)?;
        let [n, c, h, w] = logits.dims4()?;
        let pred = argmax_channels(logits.data(), n, c, h * w);
        out.extend(pred.chunks(h * w).map(|p| p.iter().map(|&ch| lut[ch as usize]).collect::<Vec<u8>>()));
    }
    Ok(out)
}

/// Confusion matrix of the model's eval-mode predictions against the
/// samples' labels.
pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let classes = model.num_classes();
    let mut cm = ConfusionMatrix::new(classes);
    let predictions = predict_labels(model, samples)?;
    for (s, pred) in samples.iter().zip(&predictions) {
        let labels = s.labels.as_ref().ok_or_else(|| Error::Data(format!("{}: evaluation sample without labels", s.id)))?;
        if let Some(&bad) = labels.iter().find(|&&l| l != VOID && l as usize >= classes) {
            return Err(Error::Data(format!("{}: label {bad} but the model predicts {classes} classes", s.id)));
        }
        cm.accumulate(pred, labels, VOID)?;
    }
    Ok(cm)
}
