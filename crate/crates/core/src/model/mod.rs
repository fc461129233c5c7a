//! Segmentation architectures: the pooling-index encoder-decoder family, a
//! small skip-fusion FCN, and a two-domain ensemble with a residual fusion
//! head. A model is a flat list of layers interpreted over a graph.

mod checkpoint;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NodeId, Padding, PoolIndices, RunningStats};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{
    load_checkpoint, read_tensor_file, save_checkpoint, write_tensor_file, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Tnet,
    MiniFcn,
    Ensemble,
}

/// Prefixes of the frozen base models inside an ensemble.
pub const ENSEMBLE_BASES: [&str; 2] = ["dense", "sparse"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Encoder plus decoder blocks (T-Net only).
    pub num_blocks: usize,
    pub feature_maps: usize,
    pub kernel: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub dropout_p: f64,
    /// Palette class predicted by each output channel; `None` marks a
    /// catch-all channel. Empty means the identity mapping.
    #[serde(default)]
    pub class_alignment: Vec<Option<u8>>,
    /// Widths of the fusion head's residual blocks (ensemble only).
    #[serde(default)]
    pub fusion_maps: Vec<usize>,
    /// Dense and sparse base configurations (ensemble only).
    #[serde(default)]
    pub bases: Vec<ModelConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Tnet,
            num_blocks: 8,
            feature_maps: 64,
            kernel: 7,
            num_classes: 11,
            input_channels: 3,
            dropout_p: 0.0,
            class_alignment: Vec::new(),
            fusion_maps: Vec::new(),
            bases: Vec::new(),
        }
    }
}

pub const DEFAULT_FUSION_MAPS: [usize; 4] = [128, 64, 64, 64];

impl ModelConfig {
    pub fn tnet(num_blocks: usize, feature_maps: usize, kernel: usize, num_classes: usize) -> Self {
        ModelConfig { num_blocks, feature_maps, kernel, num_classes, ..Default::default() }
    }

    pub fn mini_fcn(feature_maps: usize, kernel: usize, num_classes: usize) -> Self {
        ModelConfig { kind: ModelKind::MiniFcn, num_blocks: 6, feature_maps, kernel, num_classes, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes must be in [2, 255], got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if !self.class_alignment.is_empty() && self.class_alignment.len() != self.num_classes {
            return bad(format!("class_alignment has {} entries for {} classes", self.class_alignment.len(), self.num_classes));
        }
        match self.kind {
            ModelKind::Tnet | ModelKind::MiniFcn => {
                if self.kind == ModelKind::Tnet && (self.num_blocks < 2 || self.num_blocks % 2 != 0) {
                    return bad(format!("num_blocks must be even and at least 2, got {}", self.num_blocks));
                }
                if self.kernel % 2 == 0 {
                    return bad(format!("kernel must be odd, got {}", self.kernel));
                }
                if self.feature_maps == 0 || self.input_channels == 0 {
                    return bad("feature_maps and input_channels must be positive".into());
                }
            }
            ModelKind::Ensemble => {
                if self.bases.len() != 2 {
                    return bad(format!("ensemble needs 2 base models, got {}", self.bases.len()));
                }
                if self.fusion_maps.is_empty() || self.fusion_maps.contains(&0) {
                    return bad("fusion_maps must be a non-empty list of positive widths".into());
                }
                for b in &self.bases {
                    b.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Required divisor of the input height and width.
    pub fn spatial_divisor(&self) -> usize {
        match self.kind {
            ModelKind::Tnet => 1 << (self.num_blocks / 2),
            ModelKind::MiniFcn => 8,
            ModelKind::Ensemble => self.bases.iter().map(|b| b.spatial_divisor()).max().unwrap_or(1),
        }
    }

    /// Palette class of each output channel.
    pub fn alignment(&self) -> Vec<Option<u8>> {
        if self.class_alignment.is_empty() {
            (0..self.num_classes).map(|c| Some(c as u8)).collect()
        } else {
            self.class_alignment.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv { name: String, stride: usize },
    BatchNorm { name: String },
    Relu,
    Dropout,
    Pool { slot: usize },
    Unpool { slot: usize },
    Store { slot: usize },
    Load { slot: usize },
    AddStored { slot: usize },
    /// Adds the stored block input, through a 1×1 projection when named.
    Residual { slot: usize, proj: Option<String> },
    Upsample { factor: usize },
}

/// Architecture plus named parameters and batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    tensors: IndexMap<String, Tensor<T>>,
    stats: IndexMap<String, RunningStats<T>>,
    layers: Vec<Layer>,
    bases: Vec<Model<T>>,
}

/// Graph nodes holding a model's parameters for one forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    ids: IndexMap<String, NodeId>,
}

impl FromIterator<(String, NodeId)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, NodeId)>>(iter: I) -> Self {
        Bound { ids: iter.into_iter().collect() }
    }
}

impl Bound {
    /// Binds an external parameter set, as gradient-tracking leaves when
    /// `track` is set and as constants otherwise.
    pub fn from_params<T: Scalar>(g: &mut Graph<T>, params: &IndexMap<String, Tensor<T>>, track: bool) -> Self {
        let ids = params
            .iter()
            .map(|(k, v)| (k.clone(), if track { g.param(v.clone()) } else { g.leaf(v.clone()) }))
            .collect();
        Bound { ids }
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

struct Builder<'a, T: Scalar> {
    tensors: IndexMap<String, Tensor<T>>,
    stats: IndexMap<String, RunningStats<T>>,
    layers: Vec<Layer>,
    rng: &'a mut RngState,
}

impl<'a, T: Scalar> Builder<'a, T> {
    fn new(rng: &'a mut RngState) -> Self {
        Builder { tensors: IndexMap::new(), stats: IndexMap::new(), layers: Vec::new(), rng }
    }

    /// He-scaled normal weights, zero bias.
    fn conv_params(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let data = (0..cout * cin * k * k).map(|_| T::from_f64_lossy(std * self.rng.normal())).collect();
        self.tensors
            .insert(format!("{name}.weight"), Tensor::new(&[cout, cin, k, k], data).expect("conv shape"));
        if bias {
            self.tensors.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        self.conv_params(name, cin, cout, k, bias);
        self.layers.push(Layer::Conv { name: name.into(), stride: 1 });
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.tensors.insert(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        self.tensors.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.stats.insert(name.into(), RunningStats::new(c));
        self.layers.push(Layer::BatchNorm { name: name.into() });
    }

    fn conv_bn_relu(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        self.conv(&format!("{prefix}.conv"), cin, cout, k, false);
        self.bn(&format!("{prefix}.bn"), cout);
        self.layers.push(Layer::Relu);
    }

    fn finish(self, config: ModelConfig, bases: Vec<Model<T>>) -> Model<T> {
        Model { config, tensors: self.tensors, stats: self.stats, layers: self.layers, bases }
    }
}

/// Pooling-index encoder-decoder: `num_blocks / 2` conv-bn-relu-pool blocks,
/// mirrored unpool-conv-bn-relu blocks, and a 1×1 classifier.
pub fn build_tnet<T: Scalar>(config: &ModelConfig, rng: &mut RngState) -> Result<Model<T>> {
    if config.kind != ModelKind::Tnet {
        return Err(Error::Config(format!("build_tnet given a {:?} config", config.kind)));
    }
    config.validate()?;
    let half = config.num_blocks / 2;
    let (maps, k) = (config.feature_maps, config.kernel);
    let mut b = Builder::new(rng);
    let mut cin = config.input_channels;
    for i in 0..half {
        b.conv_bn_relu(&format!("enc{i}"), cin, maps, k);
        b.layers.push(Layer::Pool { slot: i });
        cin = maps;
    }
    for j in 0..half {
        // innermost decoder block reuses the last encoder's indices
        b.layers.push(Layer::Unpool { slot: half - 1 - j });
        b.conv_bn_relu(&format!("dec{j}"), maps, maps, k);
        // identity while dropout_p is 0
        b.layers.push(Layer::Dropout);
    }
    b.conv("classifier", maps, config.num_classes, 1, true);
    Ok(b.finish(config.clone(), Vec::new()))
}

/// Three conv-bn-relu-pool stages with 1×1 score heads after stages 2 and 3;
/// the coarse scores are upsampled, added to the finer ones, then upsampled
/// to the input resolution.
pub fn build_mini_fcn<T: Scalar>(config: &ModelConfig, rng: &mut RngState) -> Result<Model<T>> {
    if config.kind != ModelKind::MiniFcn {
        return Err(Error::Config(format!("build_mini_fcn given a {:?} config", config.kind)));
    }
    config.validate()?;
    let (maps, k, l) = (config.feature_maps, config.kernel, config.num_classes);
    let mut b = Builder::new(rng);
    let mut cin = config.input_channels;
    for i in 0..3 {
        b.conv_bn_relu(&format!("stage{i}"), cin, maps, k);
        b.layers.push(Layer::Pool { slot: i });
        b.layers.push(Layer::Dropout);
        if i == 1 {
            b.layers.push(Layer::Store { slot: 0 });
        }
        cin = maps;
    }
    b.conv("score3", maps, l, 1, true);
    b.layers.push(Layer::Upsample { factor: 2 });
    b.layers.push(Layer::Store { slot: 1 });
    b.layers.push(Layer::Load { slot: 0 });
    b.conv("score2", maps, l, 1, true);
    b.layers.push(Layer::AddStored { slot: 1 });
    b.layers.push(Layer::Upsample { factor: 4 });
    Ok(b.finish(config.clone(), Vec::new()))
}

/// Frozen dense and sparse models whose softmax outputs feed a trainable
/// head: conv block, residual blocks of widths `fusion_maps`, classifier.
pub fn build_ensemble<T: Scalar>(
    dense: Model<T>,
    sparse: Model<T>,
    fusion_maps: &[usize],
    rng: &mut RngState,
) -> Result<Model<T>> {
    if dense.config.input_channels != sparse.config.input_channels {
        return Err(Error::Dimension(format!(
            "base models take {} and {} input channels",
            dense.config.input_channels, sparse.config.input_channels
        )));
    }
    let config = ModelConfig {
        kind: ModelKind::Ensemble,
        num_blocks: 0,
        feature_maps: fusion_maps.first().copied().unwrap_or(0),
        kernel: 3,
        num_classes: dense.config.num_classes,
        input_channels: dense.config.input_channels,
        dropout_p: 0.0,
        class_alignment: dense.config.class_alignment.clone(),
        fusion_maps: fusion_maps.to_vec(),
        bases: vec![dense.config.clone(), sparse.config.clone()],
    };
    config.validate()?;
    let mut b = Builder::new(rng);
    let cin = dense.config.num_classes + sparse.config.num_classes;
    let mut c = fusion_maps[0];
    b.conv_bn_relu("fusion", cin, c, 3);
    for (i, &width) in fusion_maps.iter().enumerate() {
        let p = format!("res{i}");
        b.layers.push(Layer::Store { slot: 0 });
        b.conv(&format!("{p}.conv1"), c, width, 3, false);
        b.bn(&format!("{p}.bn1"), width);
        b.layers.push(Layer::Relu);
        b.conv(&format!("{p}.conv2"), width, width, 3, false);
        b.bn(&format!("{p}.bn2"), width);
        let proj = (c != width).then(|| {
            let name = format!("{p}.proj");
            b.conv_params(&name, c, width, 1, false);
            name
        });
        b.layers.push(Layer::Residual { slot: 0, proj });
        c = width;
    }
    b.conv("classifier", c, config.num_classes, 1, true);
    Ok(b.finish(config, vec![dense, sparse]))
}

pub fn build_model<T: Scalar>(config: &ModelConfig, rng: &mut RngState) -> Result<Model<T>> {
    match config.kind {
        ModelKind::Tnet => build_tnet(config, rng),
        ModelKind::MiniFcn => build_mini_fcn(config, rng),
        ModelKind::Ensemble => {
            config.validate()?;
            let dense = build_model(&config.bases[0], &mut rng.split(0))?;
            let sparse = build_model(&config.bases[1], &mut rng.split(1))?;
            build_ensemble(dense, sparse, &config.fusion_maps, rng)
        }
    }
}

fn is_stat_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn bases(&self) -> &[Model<T>] {
        &self.bases
    }

    /// Trainable parameters of this model (base models excluded).
    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<T>> {
        &mut self.tensors
    }

    pub fn running_stats(&self) -> &IndexMap<String, RunningStats<T>> {
        &self.stats
    }

    /// Every stored tensor under its checkpoint name: parameters, running
    /// statistics, and base-model tensors prefixed `dense.` / `sparse.`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (name, s) in &self.stats {
            let c = s.mean.len();
            out.push((format!("{name}.running_mean"), Tensor::new(&[c], s.mean.clone()).expect("stats shape")));
            out.push((format!("{name}.running_var"), Tensor::new(&[c], s.var.clone()).expect("stats shape")));
        }
        for (prefix, base) in ENSEMBLE_BASES.iter().zip(&self.bases) {
            out.extend(base.named_tensors().into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)));
        }
        out
    }

    /// Replaces a tensor by checkpoint name; the shape must match.
    pub fn set_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        for (i, prefix) in ENSEMBLE_BASES.iter().enumerate() {
            if let Some(rest) = name.strip_prefix(&format!("{prefix}.")) {
                if let Some(base) = self.bases.get_mut(i) {
                    return base.set_tensor(rest, value);
                }
            }
        }
        if let Some(slot) = self.tensors.get_mut(name) {
            if slot.shape() != value.shape() {
                return Err(Error::Dimension(format!("{name}: shape {:?}, expected {:?}", value.shape(), slot.shape())));
            }
            *slot = value;
            return Ok(());
        }
        if is_stat_name(name) {
            let (layer, field) = name.rsplit_once('.').expect("dotted stat name");
            if let Some(s) = self.stats.get_mut(layer) {
                let target = if field == "running_mean" { &mut s.mean } else { &mut s.var };
                if value.shape() != [target.len()] {
                    return Err(Error::Dimension(format!("{name}: shape {:?}, expected [{}]", value.shape(), target.len())));
                }
                *target = value.into_data();
                return Ok(());
            }
        }
        Err(Error::Data(format!("model has no tensor named {name}")))
    }

    /// Number of learnable values including frozen base models.
    pub fn parameter_count(&self) -> usize {
        self.trainable_parameter_count() + self.bases.iter().map(|b| b.parameter_count()).sum::<usize>()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Adds this model's trainable parameters to `g` as gradient-tracking
    /// leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound::from_params(g, &self.tensors, true)
    }

    /// Changes the dropout probability of the dropout layers (T-Net decoder
    /// blocks, FCN stages); ensembles have none.
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout_p must be in [0, 1), got {p}")));
        }
        if p > 0.0 && !self.layers.contains(&Layer::Dropout) {
            return Err(Error::Config(format!("{:?} model has no dropout layers", self.config.kind)));
        }
        self.config.dropout_p = p;
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match shape {
            [n, c, h, w] => [*n, *c, *h, *w],
            _ => return Err(Error::Dimension(format!("model input must be [N, C, H, W], got {shape:?}"))),
        };
        if c != self.config.input_channels {
            return Err(Error::Dimension(format!("model takes {} input channels, got {c}", self.config.input_channels)));
        }
        let d = self.config.spatial_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::Dimension(format!("input {h}×{w} not divisible by {d}")));
        }
        Ok(())
    }

    /// Logits for `x` inside an existing graph. Train mode updates the
    /// running statistics only when `update_stats` is set.
    pub fn forward_graph(
        &mut self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: NodeId,
        mode: Mode,
        rng: &mut RngState,
        update_stats: bool,
    ) -> Result<NodeId> {
        self.check_input(g.value(x).shape())?;
        let head_input = if self.bases.is_empty() {
            x
        } else {
            let probs = self.base_probs(g.value(x))?;
            g.leaf(probs)
        };
        self.forward_head(g, bound, head_input, mode, rng, update_stats)
    }

    /// Runs only this model's own layers. For an ensemble the input is the
    /// concatenated base softmax from [`Model::base_probs`].
    pub fn forward_head(
        &mut self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: NodeId,
        mode: Mode,
        rng: &mut RngState,
        update_stats: bool,
    ) -> Result<NodeId> {
        if update_stats && mode == Mode::Train {
            let mut stats = std::mem::take(&mut self.stats);
            let out = self.run_layers(g, bound, x, mode, rng, &mut stats);
            self.stats = stats;
            out
        } else {
            let mut stats = self.stats.clone();
            self.run_layers(g, bound, x, mode, rng, &mut stats)
        }
    }

    /// Channel-wise concatenation of the frozen base models' eval-mode
    /// softmax outputs.
    pub fn base_probs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.bases.is_empty() {
            return Err(Error::Contract("base_probs called on a model without base models".into()));
        }
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let mut parts = Vec::new();
        for base in &self.bases {
            let logits = base.predict(x)?;
            let id = g.leaf(logits);
            parts.push(g.softmax_channels(id)?);
        }
        let (a, b) = (g.value(parts[0]).shape(), g.value(parts[1]).shape());
        if a[2..] != b[2..] {
            return Err(Error::Dimension(format!("base outputs differ spatially: {a:?} vs {b:?}")));
        }
        let cat = g.concat_channels(&parts)?;
        Ok(g.value(cat).clone())
    }

    /// Eval-mode logits on a detached graph.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let bound = Bound::from_params(&mut g, &self.tensors, false);
        let input = if self.bases.is_empty() { g.leaf(x.clone()) } else { g.leaf(self.base_probs(x)?) };
        let mut stats = self.stats.clone();
        let mut rng = RngState::new(0);
        let out = self.run_layers(&mut g, &bound, input, Mode::Eval, &mut rng, &mut stats)?;
        Ok(g.value(out).clone())
    }

    /// Convenience forward on a fresh graph.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut RngState) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xi = g.leaf(x.clone());
        let out = self.forward_graph(&mut g, &bound, xi, mode, rng, true)?;
        Ok(g.value(out).clone())
    }

    fn run_layers(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: NodeId,
        mode: Mode,
        rng: &mut RngState,
        stats: &mut IndexMap<String, RunningStats<T>>,
    ) -> Result<NodeId> {
        let param = |name: String| {
            bound.get(&name).ok_or_else(|| Error::Contract(format!("parameter {name} not bound to the graph")))
        };
        let mut cur = x;
        let mut saved: HashMap<usize, NodeId> = HashMap::new();
        let mut pools: HashMap<usize, Arc<PoolIndices>> = HashMap::new();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv { name, stride } => {
                    let w = param(format!("{name}.weight"))?;
                    let b = bound.get(&format!("{name}.bias"));
                    g.conv2d(cur, w, b, *stride, Padding::Same)?
                }
                Layer::BatchNorm { name } => {
                    let gamma = param(format!("{name}.gamma"))?;
                    let beta = param(format!("{name}.beta"))?;
                    let s = stats.get_mut(name).ok_or_else(|| Error::Contract(format!("no running stats for {name}")))?;
                    g.batchnorm2d(cur, gamma, beta, mode, s)?
                }
                Layer::Relu => g.relu(cur)?,
                Layer::Dropout => g.dropout(cur, self.config.dropout_p, rng, mode)?,
                Layer::Pool { slot } => {
                    let (y, idx) = g.maxpool2_indices(cur)?;
                    pools.insert(*slot, idx);
                    y
                }
                Layer::Unpool { slot } => {
                    let idx = pools.get(slot).ok_or_else(|| Error::Contract(format!("no pooling indices in slot {slot}")))?;
                    g.unpool2(cur, idx)?
                }
                Layer::Store { slot } => {
                    saved.insert(*slot, cur);
                    cur
                }
                Layer::Load { slot } => saved[slot],
                Layer::AddStored { slot } => g.add(cur, saved[slot])?,
                Layer::Residual { slot, proj } => {
                    let skip = match proj {
                        Some(name) => g.conv2d(saved[slot], param(format!("{name}.weight"))?, None, 1, Padding::Same)?,
                        None => saved[slot],
                    };
                    g.add(cur, skip)?
                }
                Layer::Upsample { factor } => g.bilinear_upsample(cur, *factor)?,
            };
        }
        Ok(cur)
    }

    /// Plain-text table of layers with output shapes and parameter counts
    /// for an `h × w` input.
    pub fn summary(&self, h: usize, w: usize) -> Result<String> {
        self.check_input(&[1, self.config.input_channels, h, w])?;
        let mut out = String::new();
        let _ = writeln!(out, "model {:?}", self.config.kind);
        for (prefix, base) in ENSEMBLE_BASES.iter().zip(&self.bases) {
            let _ = writeln!(out, "[{prefix} base, frozen] {} parameters", base.parameter_count());
        }
        let mut shape = if self.bases.is_empty() {
            [self.config.input_channels, h, w]
        } else {
            [self.bases.iter().map(|b| b.config.num_classes).sum(), h, w]
        };
        let mut saved: HashMap<usize, [usize; 3]> = HashMap::new();
        let count = |names: &[String]| -> usize { names.iter().filter_map(|n| self.tensors.get(n)).map(|t| t.len()).sum() };
        for layer in &self.layers {
            if *layer == Layer::Dropout && self.config.dropout_p == 0.0 {
                continue;
            }
            let (label, params) = match layer {
                Layer::Conv { name, .. } => {
                    let wt = &self.tensors[&format!("{name}.weight")];
                    shape[0] = wt.shape()[0];
                    let k = wt.shape()[2];
                    (format!("conv {k}x{k} {name}"), count(&[format!("{name}.weight"), format!("{name}.bias")]))
                }
                Layer::BatchNorm { name } => (format!("batchnorm {name}"), count(&[format!("{name}.gamma"), format!("{name}.beta")])),
                Layer::Relu => ("relu".into(), 0),
                Layer::Dropout => (format!("dropout p={}", self.config.dropout_p), 0),
                Layer::Pool { slot } => {
                    shape[1] /= 2;
                    shape[2] /= 2;
                    (format!("maxpool2 -> indices[{slot}]"), 0)
                }
                Layer::Unpool { slot } => {
                    shape[1] *= 2;
                    shape[2] *= 2;
                    (format!("unpool2 <- indices[{slot}]"), 0)
                }
                Layer::Store { slot } => {
                    saved.insert(*slot, shape);
                    (format!("store [{slot}]"), 0)
                }
                Layer::Load { slot } => {
                    shape = saved[slot];
                    (format!("load [{slot}]"), 0)
                }
                Layer::AddStored { slot } => (format!("add [{slot}]"), 0),
                Layer::Residual { slot, proj } => match proj {
                    Some(name) => (format!("residual add [{slot}] via {name}"), count(&[format!("{name}.weight")])),
                    None => (format!("residual add [{slot}]"), 0),
                },
                Layer::Upsample { factor } => {
                    shape[1] *= factor;
                    shape[2] *= factor;
                    (format!("bilinear x{factor}"), 0)
                }
            };
            let _ = writeln!(out, "{label:<40} {:>4}x{:<4}x{:<4} {params:>9}", shape[0], shape[1], shape[2]);
        }
        let _ = writeln!(out, "trainable parameters: {}", self.trainable_parameter_count());
        let _ = writeln!(out, "total parameters: {}", self.parameter_count());
        Ok(out)
    }
}
