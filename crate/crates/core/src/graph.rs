//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in construction order. Because inputs
//! must already exist when a node is created, construction order is a
//! topological order, and [`Graph::backward`] simply walks it in reverse.

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Lower clamp used by [`ElementwiseOp::LogStable`].
pub const LOG_FLOOR: f64 = 1e-12;
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    LogStable,
}

/// Second operand of an elementwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Operand<T> {
    Node(NodeId),
    Scalar(T),
}

/// Within-window argmax positions recorded by [`Graph::maxpool2_indices`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    /// Shape of the tensor that was pooled.
    pub input_shape: [usize; 4],
    /// Row-major argmax (0..4) inside each 2×2 window, one per output cell.
    pub argmax: Vec<u8>,
}

impl PoolIndices {
    pub fn output_shape(&self) -> [usize; 4] {
        let [n, c, h, w] = self.input_shape;
        [n, c, h / 2, w / 2]
    }
}

/// Batch-normalization running statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

/// Per-pixel target of a cross-entropy node.
#[derive(Clone, Debug)]
pub enum Target<T> {
    /// One class index per pixel (`[N·H·W]`); pixels with zero weight are ignored.
    Hard(Vec<usize>),
    /// A distribution per pixel, laid out like the logits (`[N, L, H, W]`).
    Soft(Vec<T>),
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    Scale(T),
    Relu,
    LogStable,
    Conv2d { geom: ConvGeom, bias: bool },
    MaxPool2 { indices: Arc<PoolIndices> },
    Unpool2 { indices: Arc<PoolIndices> },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Dropout { mask: Vec<T> },
    Softmax,
    Upsample { factor: usize },
    ConcatChannels { channels: Vec<usize> },
    Sum,
    Mean,
    CrossEntropy { probs: Vec<T>, target: Target<T>, weights: Vec<T>, classes: usize },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Tape of operations and their outputs.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `id`; explicit zeros when the loss does
    /// not depend on it.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        self.grads[id.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericFault(format!("non-finite value in {what} input")))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registers an input or parameter. Gradients are tracked when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        let requires_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, vec![], requires_grad)
    }

    /// Convenience for `leaf` with gradient tracking switched on.
    pub fn param(&mut self, tensor: Tensor<T>) -> NodeId {
        self.leaf(tensor.with_grad())
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, inputs: Vec<usize>, requires_grad: bool) -> NodeId {
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, op, inputs, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(value, op, inputs.iter().map(|i| i.0).collect(), requires_grad)
    }

    fn dims4(&self, id: NodeId) -> Result<[usize; 4]> {
        self.value(id).dims4()
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: NodeId, b: Operand<T>) -> Result<NodeId> {
        let av = self.value(a);
        check_finite(av, "elementwise")?;
        match (op, b) {
            (ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul, Operand::Node(b)) => {
                let bv = self.value(b);
                check_finite(bv, "elementwise")?;
                if av.shape() != bv.shape() {
                    return Err(dim_err!("elementwise {op:?}: shapes {:?} and {:?} differ", av.shape(), bv.shape()));
                }
                let f: fn(T, T) -> T = match op {
                    ElementwiseOp::Add => |x, y| x + y,
                    ElementwiseOp::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
                let value = Tensor::new(av.shape(), data)?;
                let kind = match op {
                    ElementwiseOp::Add => Op::Add,
                    ElementwiseOp::Sub => Op::Sub,
                    _ => Op::Mul,
                };
                Ok(self.push_op(value, kind, &[a, b]))
            }
            (ElementwiseOp::Add | ElementwiseOp::Sub, Operand::Scalar(s)) => {
                let s = if op == ElementwiseOp::Sub { -s } else { s };
                // Adding zero keeps the payload bitwise (including -0.0).
                let value = if s == T::zero() { av.clone() } else { av.map(|x| x + s) };
                Ok(self.push_op(value, Op::AddScalar, &[a]))
            }
            (ElementwiseOp::Mul | ElementwiseOp::Scale, Operand::Scalar(s)) => {
                if !s.is_finite() {
                    return Err(Error::NumericFault("non-finite scale factor".into()));
                }
                let value = av.map(|x| x * s);
                Ok(self.push_op(value, Op::Scale(s), &[a]))
            }
            (ElementwiseOp::Relu, _) => {
                let value = av.map(|x| if x > T::zero() { x } else { T::zero() });
                Ok(self.push_op(value, Op::Relu, &[a]))
            }
            (ElementwiseOp::LogStable, _) => {
                let lo = T::from_f64_lossy(LOG_FLOOR);
                if av.data().iter().any(|&x| x < T::zero() || x > T::one()) {
                    return Err(Error::Parameter("log_stable expects inputs in [0, 1]".into()));
                }
                let value = av.map(|x| x.max(lo).ln());
                Ok(self.push_op(value, Op::LogStable, &[a]))
            }
            (ElementwiseOp::Scale, Operand::Node(_)) => {
                Err(Error::Parameter("scale takes a scalar operand".into()))
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Add, a, Operand::Node(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Sub, a, Operand::Node(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Mul, a, Operand::Node(b))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Add, a, Operand::Scalar(s))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Scale, a, Operand::Scalar(s))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::Relu, a, Operand::Scalar(T::zero()))
    }

    pub fn log_stable(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseOp::LogStable, a, Operand::Scalar(T::zero()))
    }

    /// Cross-correlation of `x: [N,Cin,H,W]` with `w: [Cout,Cin,k,k]` plus bias.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, padding: Padding) -> Result<NodeId> {
        let [n, cin, h, wd] = self.dims4(x)?;
        let [cout, wcin, k, k2] = self.dims4(w)?;
        if k != k2 || k % 2 == 0 {
            return Err(dim_err!("conv2d kernel must be square and odd, got {k}×{k2}"));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be ≥ 1".into()));
        }
        if wcin != cin {
            return Err(dim_err!("conv2d: input has {cin} channels, kernel expects {wcin}"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(dim_err!("conv2d bias shape {:?}, expected [{cout}]", self.value(b).shape()));
            }
        }
        let pad = match padding {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(dim_err!("conv2d: {h}×{wd} input smaller than {k}×{k} kernel"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { n, cin, h, w: wd, cout, k, stride, pad, ho, wo };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(value, Op::Conv2d { geom, bias: b.is_some() }, &inputs))
    }

    /// 2×2 stride-2 max pooling that also returns the argmax positions.
    pub fn maxpool2_indices(&mut self, x: NodeId) -> Result<(NodeId, Arc<PoolIndices>)> {
        let [n, c, h, w] = self.dims4(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err!("maxpool2 needs even spatial dims, got {h}×{w}"));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), n * c, h, w);
        let indices = Arc::new(PoolIndices { input_shape: [n, c, h, w], argmax });
        let value = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        let id = self.push_op(value, Op::MaxPool2 { indices: indices.clone() }, &[x]);
        Ok((id, indices))
    }

    /// Places every value of `y` at the argmax recorded in `indices`.
    pub fn unpool2(&mut self, y: NodeId, indices: &Arc<PoolIndices>) -> Result<NodeId> {
        let shape = self.dims4(y)?;
        if shape != indices.output_shape() {
            return Err(dim_err!(
                "unpool2: input {:?} does not match indices recorded for {:?}",
                shape,
                indices.input_shape
            ));
        }
        let [n, c, h, w] = indices.input_shape;
        let out = kernels::unpool2_scatter(self.value(y).data(), &indices.argmax, n * c, h, w);
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push_op(value, Op::Unpool2 { indices: indices.clone() }, &[y]))
    }

    /// Batch normalization. In train mode, batch statistics normalize the
    /// input and `running` is updated; eval mode normalizes with `running`.
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: Mode,
        running: &mut RunningStats<T>,
    ) -> Result<NodeId> {
        let [n, c, h, w] = self.dims4(x)?;
        for (what, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(dim_err!("batchnorm {what} shape {:?}, expected [{c}]", self.value(id).shape()));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(dim_err!("batchnorm running stats sized {}, expected {c}", running.mean.len()));
        }
        let plane = h * w;
        let count = n * plane;
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(dim_err!("batchnorm train mode needs N·H·W ≥ 2, got {count}"));
                }
                let (mean, var) = kernels::channel_moments(self.value(x).data(), n, c, plane);
                let unbias = count as f64 / (count - 1) as f64;
                for ch in 0..c {
                    let m = T::from_f64_lossy(BN_MOMENTUM);
                    let one_m = T::from_f64_lossy(1.0 - BN_MOMENTUM);
                    running.mean[ch] = m * running.mean[ch] + one_m * T::from_f64_lossy(mean[ch]);
                    running.var[ch] = m * running.var[ch] + one_m * T::from_f64_lossy(var[ch] * unbias);
                }
                (mean, var)
            }
            Mode::Eval => (
                running.mean.iter().map(|v| v.as_f64()).collect(),
                running.var.iter().map(|v| v.as_f64()).collect(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64_lossy(1.0 / (v + BN_EPSILON).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (xv[i] - mean_t[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = xh * g[ch] + b[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push_op(value, Op::BatchNorm { xhat, inv_std, train: mode == Mode::Train }, &[x, gamma, beta]))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut RngState, mode: Mode) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep_scale })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push_op(value, Op::Dropout { mask }, &[x]))
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, l, h, w] = self.dims4(x)?;
        if l < 2 {
            return Err(dim_err!("softmax needs at least 2 channels, got {l}"));
        }
        let out = kernels::softmax_channels(self.value(x).data(), l, h * w);
        let value = Tensor::new(&[n, l, h, w], out)?;
        Ok(self.push_op(value, Op::Softmax, &[x]))
    }

    /// Fixed bilinear upsampling (align-corners=false) by 2, 4 or 8.
    pub fn bilinear_upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if ![2, 4, 8].contains(&factor) {
            return Err(Error::Parameter(format!("unsupported upsampling factor {factor}")));
        }
        let [n, c, h, w] = self.dims4(x)?;
        let out = kernels::upsample_forward(self.value(x).data(), n * c, h, w, factor);
        let value = Tensor::new(&[n, c, h * factor, w * factor], out)?;
        Ok(self.push_op(value, Op::Upsample { factor }, &[x]))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let [n, _, h, w] = self.dims4(*first)?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pn, pc, ph, pw] = self.dims4(p)?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(dim_err!("concat: {:?} incompatible with {:?}", self.value(p).shape(), self.value(*first).shape()));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                out.extend_from_slice(&self.value(p).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], out)?;
        Ok(self.push_op(value, Op::ConcatChannels { channels }, parts))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        Ok(self.push_op(Tensor::scalar(s), Op::Sum, &[x]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.sum() / T::from_usize(v.len()).expect("length fits");
        Ok(self.push_op(Tensor::scalar(s), Op::Mean, &[x]))
    }

    /// `Σ_p weight_p · (−Σ_l target_{p,l} · log softmax(logits)_{p,l})` over
    /// all pixels `p` of `[N, L, H, W]` logits. Pixels with zero weight
    /// contribute nothing; hard targets on such pixels are not range-checked.
    pub fn cross_entropy(&mut self, logits: NodeId, target: Target<T>, weights: Vec<T>) -> Result<NodeId> {
        let [n, l, h, w] = self.dims4(logits)?;
        let plane = h * w;
        if weights.len() != n * plane {
            return Err(dim_err!("cross_entropy: {} pixel weights for {} pixels", weights.len(), n * plane));
        }
        let x = self.value(logits).data();
        let logp = kernels::log_softmax_channels(x, l, plane);
        let mut loss = 0.0f64;
        match &target {
            Target::Hard(labels) => {
                if labels.len() != n * plane {
                    return Err(dim_err!("cross_entropy: {} labels for {} pixels", labels.len(), n * plane));
                }
                for b in 0..n {
                    for p in 0..plane {
                        let wt = weights[b * plane + p];
                        if wt == T::zero() {
                            continue;
                        }
                        let y = labels[b * plane + p];
                        if y >= l {
                            return Err(Error::Data(format!("label {y} outside [0, {l})")));
                        }
                        loss -= (wt * logp[(b * l + y) * plane + p]).as_f64();
                    }
                }
            }
            Target::Soft(t) => {
                if t.len() != x.len() {
                    return Err(dim_err!("cross_entropy: soft target has {} values, logits {}", t.len(), x.len()));
                }
                for b in 0..n {
                    for p in 0..plane {
                        let wt = weights[b * plane + p];
                        if wt == T::zero() {
                            continue;
                        }
                        let mut s = T::zero();
                        for c in 0..l {
                            let i = (b * l + c) * plane + p;
                            s = s + t[i] * logp[i];
                        }
                        loss -= (wt * s).as_f64();
                    }
                }
            }
        }
        let probs = logp.iter().map(|v| v.exp()).collect();
        let value = Tensor::scalar(T::from_f64_lossy(loss));
        Ok(self.push_op(value, Op::CrossEntropy { probs, target, weights, classes: l }, &[logits]))
    }

    /// Gradients of a scalar `loss` w.r.t. every node that tracks gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape())));
        }
        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..count).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g)?;
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                match &mut grads[*input] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(c),
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match g {
                Some(g) if node.requires_grad && matches!(node.op, Op::Leaf) => {
                    Some(Tensor::new(node.value.shape(), g).expect("gradient matches its node"))
                }
                _ => None,
            })
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, node: &Node<T>, k: usize) -> bool {
        self.nodes[node.inputs[k]].requires_grad
    }

    fn input(&self, node: &Node<T>, k: usize) -> &Tensor<T> {
        &self.nodes[node.inputs[k]].value
    }

    fn node_backward(&self, node: &Node<T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add => vec![
                self.wants(node, 0).then(|| g.to_vec()),
                self.wants(node, 1).then(|| g.to_vec()),
            ],
            Op::Sub => vec![
                self.wants(node, 0).then(|| g.to_vec()),
                self.wants(node, 1).then(|| g.iter().map(|&v| -v).collect()),
            ],
            Op::Mul => {
                let (a, b) = (self.input(node, 0).data(), self.input(node, 1).data());
                vec![
                    self.wants(node, 0).then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
                    self.wants(node, 1).then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
                ]
            }
            Op::AddScalar => vec![Some(g.to_vec())],
            Op::Scale(s) => vec![Some(g.iter().map(|&v| v * *s).collect())],
            Op::Relu => {
                let x = self.input(node, 0).data();
                vec![Some(g.iter().zip(x).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect())]
            }
            Op::LogStable => {
                let x = self.input(node, 0).data();
                let lo = T::from_f64_lossy(LOG_FLOOR);
                vec![Some(g.iter().zip(x).map(|(&g, &x)| if x > lo { g / x } else { T::zero() }).collect())]
            }
            Op::Conv2d { geom, bias } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.input(node, 0).data(),
                    self.input(node, 1).data(),
                    g,
                    geom,
                    self.wants(node, 0),
                    self.wants(node, 1),
                    *bias && self.wants(node, 2),
                );
                let mut v = vec![dx, dw];
                if *bias {
                    v.push(db);
                }
                v
            }
            Op::MaxPool2 { indices } => {
                let [n, c, h, w] = indices.input_shape;
                vec![Some(kernels::unpool2_scatter(g, &indices.argmax, n * c, h, w))]
            }
            Op::Unpool2 { indices } => {
                let [n, c, h, w] = indices.input_shape;
                vec![Some(kernels::unpool2_gather(g, &indices.argmax, n * c, h, w))]
            }
            Op::BatchNorm { xhat, inv_std, train } => {
                let [n, c, h, w] = self.input(node, 0).dims4()?;
                let gamma = self.input(node, 1).data();
                let plane = h * w;
                let count = (n * plane) as f64;
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] += (g[i] * xhat[i]).as_f64();
                            dbeta[ch] += g[i].as_f64();
                        }
                    }
                }
                let dx = self.wants(node, 0).then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let scale = gamma[ch] * inv_std[ch];
                            if *train {
                                let mean_dy = T::from_f64_lossy(dbeta[ch] / count);
                                let mean_dy_xhat = T::from_f64_lossy(dgamma[ch] / count);
                                for i in off..off + plane {
                                    dx[i] = scale * (g[i] - mean_dy - xhat[i] * mean_dy_xhat);
                                }
                            } else {
                                for i in off..off + plane {
                                    dx[i] = scale * g[i];
                                }
                            }
                        }
                    }
                    dx
                });
                vec![
                    dx,
                    self.wants(node, 1).then(|| dgamma.iter().map(|&v| T::from_f64_lossy(v)).collect()),
                    self.wants(node, 2).then(|| dbeta.iter().map(|&v| T::from_f64_lossy(v)).collect()),
                ]
            }
            Op::Dropout { mask } => vec![Some(g.iter().zip(mask).map(|(&g, &m)| g * m).collect())],
            Op::Softmax => {
                let [n, l, h, w] = node.value.dims4()?;
                let plane = h * w;
                let y = node.value.data();
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for p in 0..plane {
                        let mut dot = T::zero();
                        for c in 0..l {
                            let i = (b * l + c) * plane + p;
                            dot = dot + g[i] * y[i];
                        }
                        for c in 0..l {
                            let i = (b * l + c) * plane + p;
                            dx[i] = y[i] * (g[i] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Upsample { factor } => {
                let [n, c, h, w] = self.input(node, 0).dims4()?;
                vec![Some(kernels::upsample_backward(g, n * c, h, w, *factor))]
            }
            Op::ConcatChannels { channels } => {
                let [n, total, h, w] = node.value.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                let mut parts = Vec::with_capacity(channels.len());
                for (k, &c) in channels.iter().enumerate() {
                    if self.wants(node, k) {
                        let mut part = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            part.extend_from_slice(&g[start..start + c * plane]);
                        }
                        parts.push(Some(part));
                    } else {
                        parts.push(None);
                    }
                    offset += c;
                }
                parts
            }
            Op::Sum => vec![Some(vec![g[0]; self.input(node, 0).len()])],
            Op::Mean => {
                let len = self.input(node, 0).len();
                vec![Some(vec![g[0] / T::from_usize(len).expect("length fits"); len])]
            }
            Op::CrossEntropy { probs, target, weights, classes } => {
                let l = *classes;
                let [bn, _, h, w] = self.input(node, 0).dims4()?;
                let plane = h * w;
                let mut dx = vec![T::zero(); probs.len()];
                for b in 0..bn {
                    for p in 0..plane {
                        let wt = weights[b * plane + p] * g[0];
                        if wt == T::zero() {
                            continue;
                        }
                        match target {
                            Target::Hard(labels) => {
                                let y = labels[b * plane + p];
                                for c in 0..l {
                                    let i = (b * l + c) * plane + p;
                                    let t = if c == y { T::one() } else { T::zero() };
                                    dx[i] = wt * (probs[i] - t);
                                }
                            }
                            Target::Soft(t) => {
                                let mut mass = T::zero();
                                for c in 0..l {
                                    mass = mass + t[(b * l + c) * plane + p];
                                }
                                for c in 0..l {
                                    let i = (b * l + c) * plane + p;
                                    dx[i] = wt * (probs[i] * mass - t[i]);
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }
        };
        Ok(out)
    }
}
