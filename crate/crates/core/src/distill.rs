//! Knowledge transfer from a teacher to a compact student through cached
//! teacher predictions: hard labels, soft distributions, soft distributions
//! with student dropout, and class-weighted soft distributions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{bgc_batch_sampler, BatchPlan, Domain, Sample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Target};
use crate::loss::{argmax_channels, class_frequencies, expected_weight, temper, wce_weights, VOID};
use crate::metrics::{metrics, ConfusionMatrix, Metrics};
use crate::model::{read_tensor_file, write_tensor_file, Model};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::train::{
    optimize_step, predict_labels, prepare_input, unstack, DivergenceGuard, EpochRecord, GuardParams, Health, Optimizer,
    OptimizerKind, RunStatus, ScgdParams, TrainLog, TrainOutcome, EVAL_BATCH,
};

pub const CACHE_INDEX: &str = "index.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    TkL,
    TkSmp,
    TkSmpDrop,
    TkSmpWce,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::TkL, Method::TkSmp, Method::TkSmpDrop, Method::TkSmpWce];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::TkL => "tk-l",
            Method::TkSmp => "tk-smp",
            Method::TkSmpDrop => "tk-smp-drop",
            Method::TkSmpWce => "tk-smp-wce",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let norm = s.replace('_', "-");
        Method::ALL.into_iter().find(|m| m.as_str() == norm).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
            format!("unknown method {s:?}, expected one of {}", names.join(", "))
        })
    }
}

/// Which images the class frequencies behind the `tk-smp-wce` weights are
/// counted on (always from teacher predictions).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// The whole transfer set.
    Pooled,
    /// Only images of the labeled pool.
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub method: Method,
    /// `n_dense` images from the labeled pool and `n_sparse` from the
    /// unlabeled pool per batch; `lambda` weighs the unlabeled part.
    pub batch: BatchPlan,
    pub epochs: usize,
    /// Zero derives one epoch from the set size and the batch size.
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Student dropout during transfer (`tk-smp-drop` only).
    pub dropout_p: f64,
    pub temperature: f64,
    pub weight_source: WeightSource,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub line_search: ScgdParams,
    pub guard: GuardParams,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            method: Method::TkSmpWce,
            batch: BatchPlan::default(),
            epochs: 5,
            steps_per_epoch: 0,
            seed: 0,
            dropout_p: 0.3,
            temperature: 1.0,
            weight_source: WeightSource::Pooled,
            optimizer: OptimizerKind::Scgd,
            learning_rate: 0.01,
            line_search: ScgdParams::default(),
            guard: GuardParams::default(),
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        self.batch.validate()?;
        self.line_search.validate()?;
        self.guard.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.method == Method::TkSmpDrop && !(self.dropout_p > 0.0 && self.dropout_p < 1.0) {
            return Err(Error::Config(format!("tk-smp-drop needs dropout_p in (0, 1), got {}", self.dropout_p)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Teacher softmax `[L, H, W]` and its argmax `[H * W]` for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEntry {
    pub probs: Tensor<f32>,
    pub labels: Vec<u8>,
}

/// Teacher predictions keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache {
    key: String,
    num_classes: usize,
    entries: IndexMap<String, TeacherEntry>,
}

fn cache_file(id: &str) -> String {
    format!("{id}.sdnc")
}

impl TeacherCache {
    /// Builds a cache from precomputed entries; every map must sum to one
    /// per pixel and its labels must be the argmax.
    pub fn from_entries(key: impl Into<String>, entries: IndexMap<String, TeacherEntry>) -> Result<Self> {
        let num_classes = entries.values().next().map(|e| e.probs.shape()[0]).unwrap_or(0);
        for (id, e) in &entries {
            let [l, h, w] = match e.probs.shape() {
                [l, h, w] => [*l, *h, *w],
                s => return Err(Error::Dimension(format!("{id}: teacher map of shape {s:?}, expected [L, H, W]"))),
            };
            if l != num_classes || e.labels.len() != h * w {
                return Err(Error::Dimension(format!("{id}: inconsistent teacher entry")));
            }
            let d = e.probs.data();
            for p in 0..h * w {
                let s: f64 = (0..l).map(|c| d[c * h * w + p] as f64).sum();
                if (s - 1.0).abs() > 1e-3 {
                    return Err(Error::Data(format!("{id}: teacher distribution at pixel {p} sums to {s}")));
                }
            }
            if argmax_channels(d, 1, l, h * w) != e.labels {
                return Err(Error::Data(format!("{id}: teacher labels are not the argmax of its distribution")));
            }
        }
        Ok(TeacherCache { key: key.into(), num_classes, entries })
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&TeacherEntry> {
        self.entries.get(id).ok_or_else(|| Error::Data(format!("teacher cache has no entry for sample {id}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TeacherEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// One tensor file per sample plus an index listing ids and files.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = format!("# key\t{}\n", self.key);
        for (id, e) in &self.entries {
            let [h, w] = [e.probs.shape()[1], e.probs.shape()[2]];
            let labels = Tensor::new(&[h, w], e.labels.iter().map(|&l| l as f32).collect())?;
            let header = serde_json::json!({ "id": id }).to_string();
            write_tensor_file(&dir.join(cache_file(id)), &header, &[("probs".into(), e.probs.clone()), ("labels".into(), labels)])?;
            let _ = writeln!(index, "{id}\t{}", cache_file(id));
        }
        let path = dir.join(CACHE_INDEX);
        fs::write(&path, index).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path: PathBuf = dir.join(CACHE_INDEX);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut key = None;
        let mut entries = IndexMap::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(k) = line.strip_prefix("# key\t") {
                key = Some(k.to_string());
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, file) = line
                .split_once('\t')
                .ok_or_else(|| Error::format_at_line(&path, i + 1, "expected id and file separated by a tab"))?;
            let file_path = dir.join(file);
            let (_, tensors) = read_tensor_file::<f32>(&file_path)?;
            let find = |name: &str| {
                tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone()).ok_or_else(|| Error::Format {
                    path: file_path.clone(),
                    location: "tensor table".into(),
                    message: format!("missing tensor {name}"),
                })
            };
            let probs = find("probs")?;
            let labels = find("labels")?.data().iter().map(|&v| v as u8).collect();
            entries.insert(id.to_string(), TeacherEntry { probs, labels });
        }
        let key = key.ok_or_else(|| Error::format_at_line(&path, 1, "missing key line"))?;
        Self::from_entries(key, entries)
    }
}

/// Runs the teacher in eval mode over `samples` and caches its softmax and
/// argmax per sample id; writes the cache to `out_dir` when given.
pub fn teacher_predict_cache(teacher: &Model<f32>, samples: &[Sample], out_dir: Option<&Path>, key: &str) -> Result<TeacherCache> {
    let alignment = teacher.config().alignment();
    if alignment.iter().enumerate().any(|(i, a)| *a != Some(i as u8)) {
        return Err(Error::Config("teacher must predict palette classes in palette order".into()));
    }
    let mut entries = IndexMap::new();
    for chunk in samples.chunks(EVAL_BATCH) {
        let inputs = chunk.iter().map(prepare_input).collect::<Result<Vec<_>>>()?;
        let logits = teacher.predict(&Tensor::stack_batch(&inputs.iter().collect::<Vec<_>>())?)?;
        let mut g = Graph::new();
        let id = g.leaf(logits);
        let probs = g.softmax_channels(id)?;
        for (s, p) in chunk.iter().zip(unstack(g.value(probs))?) {
            let [_, l, h, w] = p.dims4()?;
            let labels = argmax_channels(p.data(), 1, l, h * w);
            entries.insert(s.id.clone(), TeacherEntry { probs: p.reshape(&[l, h, w])?, labels });
        }
    }
    let cache = TeacherCache::from_entries(key, entries)?;
    if let Some(dir) = out_dir {
        cache.save(dir)?;
    }
    Ok(cache)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone)]
pub struct TransferImage {
    pub id: String,
    pub pool: Pool,
    x: Tensor<f32>,
}

/// Preprocessed transfer images without any ground truth.
#[derive(Debug, Clone, Default)]
pub struct TransferSet {
    images: Vec<TransferImage>,
}

impl TransferSet {
    /// Drops labels; unlabeled-domain samples form the unlabeled pool.
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let images = samples
            .iter()
            .map(|s| {
                Ok(TransferImage {
                    id: s.id.clone(),
                    pool: if s.domain == Domain::Unlabeled { Pool::Unlabeled } else { Pool::Labeled },
                    x: prepare_input(s)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TransferSet { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[TransferImage] {
        &self.images
    }

    fn pool(&self, pool: Pool) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| self.images[i].pool == pool).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub outcome: TrainOutcome,
    /// Eval-mode mean per-pixel cross-entropy between teacher and student
    /// over the whole set before training.
    pub initial_loss: f64,
}

fn teacher_targets(cache: &TeacherCache, id: &str, temperature: f64) -> Result<(Vec<f32>, Vec<u8>)> {
    let e = cache.get(id)?;
    let plane = e.labels.len();
    Ok((temper(e.probs.data(), cache.num_classes, plane, temperature), e.labels.clone()))
}

/// Mean teacher-student cross-entropy per pixel with the student in eval
/// mode.
pub fn distillation_loss(student: &Model<f32>, cache: &TeacherCache, set: &TransferSet) -> Result<f64> {
    let mut total = 0.0;
    let mut pixels = 0usize;
    for chunk in set.images.chunks(EVAL_BATCH) {
        let x = Tensor::stack_batch(&chunk.iter().map(|im| &im.x).collect::<Vec<_>>())?;
        let logits = student.predict(&x)?;
        let [n, l, h, w] = logits.dims4()?;
        let mut probs = Vec::with_capacity(n * l * h * w);
        for im in chunk {
            probs.extend_from_slice(cache.get(&im.id)?.probs.data());
        }
        let mut g = Graph::new();
        let id = g.leaf(logits);
        let loss = g.cross_entropy(id, Target::Soft(probs), vec![1.0; n * h * w])?;
        total += g.value(loss).item() as f64;
        pixels += n * h * w;
    }
    Ok(total / pixels as f64)
}

/// Trains `student` to imitate the cached teacher on `set`. Batches mix
/// the labeled and unlabeled pools in the configured proportions; each part
/// is averaged over its pixels and the unlabeled part is scaled by `λ`.
pub fn distill(student: &mut Model<f32>, cache: &TeacherCache, set: &TransferSet, config: &TransferConfig) -> Result<DistillOutcome> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::Data("empty transfer set".into()));
    }
    let classes = student.num_classes();
    if cache.num_classes() != classes {
        return Err(Error::Dimension(format!("teacher predicts {} classes, student {classes}", cache.num_classes())));
    }
    for im in &set.images {
        cache.get(&im.id)?;
    }
    if config.method == Method::TkSmpDrop {
        student.set_dropout(config.dropout_p)?;
    }
    let initial_loss = distillation_loss(student, cache, set)?;
    let labeled = set.pool(Pool::Labeled);
    let unlabeled = set.pool(Pool::Unlabeled);
    let (omega, kappa) = match config.method {
        Method::TkSmpWce => {
            let source: Vec<&TransferImage> = match config.weight_source {
                WeightSource::Pooled => set.images.iter().collect(),
                WeightSource::Labeled => labeled.iter().map(|&i| &set.images[i]).collect(),
            };
            let maps = source.iter().map(|im| cache.get(&im.id).map(|e| e.labels.as_slice())).collect::<Result<Vec<_>>>()?;
            let stats = class_frequencies(maps, classes, VOID)?;
            let omega = wce_weights(&stats);
            let kappa = expected_weight(&stats, &omega);
            (omega, kappa)
        }
        _ => (vec![1.0; classes], 1.0),
    };
    let batch_size = config.batch.n_dense + config.batch.n_sparse;
    let steps_per_epoch = match config.steps_per_epoch {
        0 => set.len().div_ceil(batch_size).max(1),
        n => n,
    };
    let rng = RngState::new(config.seed);
    let mut seed_rng = rng.split(2);
    let mut sampler = bgc_batch_sampler(labeled.len(), unlabeled.len(), config.batch, rng.split(4))?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, config.line_search);
    let mut guard = DivergenceGuard::new(config.guard);
    let mut log = TrainLog::default();
    let mut status = RunStatus::Completed;
    let mut reason = None;
    let hard = config.method == Method::TkL;

    for epoch in 0..config.epochs {
        let first_step = log.steps.len();
        for _ in 0..steps_per_epoch {
            let b = sampler.next().expect("endless sampler");
            let chosen: Vec<&TransferImage> =
                b.dense.iter().map(|&i| &set.images[labeled[i]]).chain(b.sparse.iter().map(|&i| &set.images[unlabeled[i]])).collect();
            let x = Tensor::stack_batch(&chosen.iter().map(|im| &im.x).collect::<Vec<_>>())?;
            let plane = x.shape()[2] * x.shape()[3];
            let mut probs = Vec::with_capacity(chosen.len() * classes * plane);
            let mut labels = Vec::with_capacity(chosen.len() * plane);
            for im in &chosen {
                let (p, l) = teacher_targets(cache, &im.id, config.temperature)?;
                probs.extend(p);
                labels.extend(l);
            }
            let parts = [(b.dense.len(), 1.0), (b.sparse.len(), config.batch.lambda)];
            let mut weights = Vec::with_capacity(labels.len());
            let mut offset = 0;
            for (count, scale) in parts {
                let norm = scale / (count * plane).max(1) as f64;
                for &l in &labels[offset..offset + count * plane] {
                    weights.push((omega[l as usize] * norm) as f32);
                }
                offset += count * plane;
            }
            let loss_fn = |g: &mut Graph<f32>, logits| {
                let target = if hard {
                    Target::Hard(labels.iter().map(|&l| l as usize).collect())
                } else {
                    Target::Soft(probs.clone())
                };
                g.cross_entropy(logits, target, weights.clone())
            };
            match optimize_step(student, &mut opt, &x, seed_rng.next_seed(), kappa, &loss_fn) {
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
        let (loss_mean, _) = crate::train::mean_var(&steps.iter().map(|s| s.loss).collect::<Vec<_>>());
        let (grad_norm_mean, grad_norm_var) = crate::train::mean_var(&steps.iter().map(|s| s.grad_norm).collect::<Vec<_>>());
        log::info!("{} epoch {}: loss {loss_mean:.5}", config.method, epoch + 1);
        log.epochs.push(EpochRecord { epoch: epoch + 1, loss_mean, grad_norm_mean, grad_norm_var, snapshot: None });
        if status == RunStatus::Diverged {
            break;
        }
    }
    Ok(DistillOutcome { outcome: TrainOutcome { status, reason, log }, initial_loss })
}

/// Student against teacher on a labeled test set.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    /// Pixels where both models predict the same class, in percent.
    pub agreement: f64,
    pub student: Metrics,
    pub teacher: Metrics,
}

pub fn transfer_report(student: &Model<f32>, teacher: &Model<f32>, test: &[Sample]) -> Result<TransferReport> {
    if student.num_classes() != teacher.num_classes() {
        return Err(Error::Dimension(format!("student predicts {} classes, teacher {}", student.num_classes(), teacher.num_classes())));
    }
    let a = predict_labels(student, test)?;
    let b = predict_labels(teacher, test)?;
    let classes = student.num_classes();
    let (mut cm_a, mut cm_b) = (ConfusionMatrix::new(classes), ConfusionMatrix::new(classes));
    let (mut same, mut total) = (0usize, 0usize);
    for ((s, pa), pb) in test.iter().zip(&a).zip(&b) {
        let labels = s.labels.as_ref().ok_or_else(|| Error::Data(format!("{}: test sample without labels", s.id)))?;
        cm_a.accumulate(pa, labels, VOID)?;
        cm_b.accumulate(pb, labels, VOID)?;
        same += pa.iter().zip(pb).filter(|(x, y)| x == y).count();
        total += pa.len();
    }
    if total == 0 {
        return Err(Error::Data("empty test set".into()));
    }
    Ok(TransferReport { agreement: 100.0 * same as f64 / total as f64, student: metrics(&cm_a)?, teacher: metrics(&cm_b)? })
}

impl TransferReport {
    /// `class,student,teacher,gap` rows, then per-class, global and
    /// agreement.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into());
        let mut out = String::from("class,student,teacher,gap\n");
        for (i, name) in class_names.iter().enumerate() {
            let s = self.student.per_class_breakdown.get(i).copied().flatten();
            let t = self.teacher.per_class_breakdown.get(i).copied().flatten();
            let gap = s.zip(t).map(|(s, t)| s - t);
            let _ = writeln!(out, "{name},{},{},{}", fmt(s), fmt(t), fmt(gap));
        }
        let _ = writeln!(out, "per-class,{:.2},{:.2},{:.2}", self.student.per_class, self.teacher.per_class, self.student.per_class - self.teacher.per_class);
        let _ = writeln!(out, "global,{:.2},{:.2},{:.2}", self.student.global, self.teacher.global, self.student.global - self.teacher.global);
        let _ = writeln!(out, "agreement,{:.2},,", self.agreement);
        out
    }
}
